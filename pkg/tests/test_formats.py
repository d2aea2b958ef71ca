import json

import numpy as np
import pytest

from groundplan.formats import (
    episode_from_json,
    episode_to_json,
    gt_plan_from_json,
    load_dataset,
    plan_from_json,
    plan_to_json,
    save_dataset,
    write_jsonl,
)
from groundplan.model import PlanError, gt_to_predicted
from groundplan.synth import SynthesisConfig, gen_dataset


def test_episode_json_round_trip(tmp_path):
    eps = gen_dataset(SynthesisConfig(unordered_block_prob=0.6), 30)
    save_dataset(tmp_path / "d.jsonl", eps)
    loaded = load_dataset(tmp_path / "d.jsonl")
    for a, b in zip(eps, loaded):
        assert b.image_ref == str(tmp_path / a.image_ref)
        assert b.gt_plan == a.gt_plan  # generator boxes sit on the pixel grid
        assert (b.explicit_instruction, b.implicit_instruction) == (a.explicit_instruction, a.implicit_instruction)


def test_flat_plan_list_accepted():
    plan = [
        {"action": "grasp", "target": "cup", "bbox": [10, 10, 20, 20]},
        {"action": "place", "target": "tray", "bbox": [50, 50, 80, 80]},
        {"action": "open", "target": "drawer", "bbox": [0, 0, 40, 40]},
    ]
    gt = gt_plan_from_json(plan, 100, 100)
    assert gt.n_units == 2 and not any(b.unordered for b in gt.blocks)


def test_block_form_and_errors():
    block = {"unordered": True, "actions": [
        {"action": "open", "target": "a", "bbox": [0, 0, 10, 10]},
        {"action": "close", "target": "b", "bbox": [20, 20, 30, 30]},
    ]}
    gt = gt_plan_from_json([block], 100, 100)
    assert gt.blocks[0].unordered and gt.n_units == 2
    with pytest.raises(PlanError):
        gt_plan_from_json([{"action": "grasp", "target": "cup", "bbox": [0, 0, 10, 10]}], 100, 100)
    with pytest.raises(PlanError):
        gt_plan_from_json([], 100, 100)


def test_duplicate_ids_rejected(tmp_path):
    rec = episode_to_json(gen_dataset(SynthesisConfig(), 1)[0])
    write_jsonl(tmp_path / "d.jsonl", [rec, rec])
    with pytest.raises(PlanError, match="duplicate"):
        load_dataset(tmp_path / "d.jsonl")


def test_normalized_plan_json_round_trip():
    ep = gen_dataset(SynthesisConfig(), 1)[0]
    plan = gt_to_predicted(ep.gt_plan)
    assert plan_from_json(json.loads(json.dumps(plan_to_json(plan)))) == plan


def test_write_jsonl_is_atomic(tmp_path):
    path = tmp_path / "x.jsonl"
    write_jsonl(path, [{"a": 1}])

    def boom():
        yield {"a": 2}
        raise RuntimeError("interrupted")

    with pytest.raises(RuntimeError):
        write_jsonl(path, boom())
    assert path.read_text() == '{"a": 1}\n'
    assert not (tmp_path / "x.jsonl.partial").exists()
