import itertools

import numpy as np
import pytest

from groundplan.model import GtBlock, GtPlan, HorizonBucket, Manipulation, gt_to_predicted
from groundplan.scoring import Thresholds, arr_episode, match_episode_ordered, score_episode
from groundplan.synth import (
    SynthesisConfig,
    binomial_interval,
    brute_force_tsr,
    gen_dataset,
    gen_episode,
    perturbed_planner,
    write_placeholder_image,
)


def test_same_seed_same_episodes():
    cfg = SynthesisConfig(seed=5)
    assert gen_dataset(cfg, 20) == gen_dataset(cfg, 20)
    assert gen_dataset(cfg, 5) != gen_dataset(SynthesisConfig(seed=6), 5)


def test_four_units_is_short():
    ep = gen_episode(SynthesisConfig(n_units=(4, 4)), np.random.default_rng(0))
    assert ep.gt_plan.n_units == 4 and ep.bucket is HorizonBucket.SHORT


def test_no_unordered_blocks_when_prob_zero():
    cfg = SynthesisConfig(unordered_block_prob=0.0)
    for ep in gen_dataset(cfg, 50):
        assert all(not b.unordered and len(b.units) == 1 for b in ep.gt_plan.blocks)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthesisConfig(unordered_block_prob=1.5)
    with pytest.raises(ValueError):
        SynthesisConfig(n_units=(5, 2))


def test_generated_artifacts_valid():
    cfg = SynthesisConfig(n_units=(1, 26), unordered_block_prob=0.5, duplicate_prob=0.3)
    for ep in gen_dataset(cfg, 100):
        assert 1 <= ep.gt_plan.n_units <= 26
        assert ep.explicit_instruction and ep.implicit_instruction
        assert any(isinstance(u, Manipulation) for u in ep.gt_plan.units) or ep.gt_plan.n_units >= 1


def test_perturbed_extremes():
    rng = np.random.default_rng(1)
    for ep in gen_dataset(SynthesisConfig(n_units=(1, 10)), 40):
        good = perturbed_planner(ep.gt_plan, 1.0, rng=rng)
        s = score_episode(good.units, ep.gt_plan)
        assert s.tsr and s.arr_matched == s.arr_total
        bad = perturbed_planner(ep.gt_plan, 0.0, rng=rng)
        s = score_episode(bad.units, ep.gt_plan)
        assert not s.tsr and s.arr_matched == 0


def test_failing_units_match_nothing():
    # every failing unit must fail against every GT unit, not just its own
    rng = np.random.default_rng(2)
    cfg = SynthesisConfig(n_units=(2, 8), duplicate_prob=0.5)
    for ep in gen_dataset(cfg, 60):
        bad = perturbed_planner(ep.gt_plan, 0.0, rng=rng)
        assert arr_episode(bad.units, ep.gt_plan)[0] == 0


def test_perturbed_arr_near_p():
    rng = np.random.default_rng(3)
    matched = total = 0
    for ep in gen_dataset(SynthesisConfig(seed=3, n_units=(5, 15)), 1100):
        m, t, _ = arr_episode(perturbed_planner(ep.gt_plan, 0.7, (0.01, 0.01), rng).units, ep.gt_plan)
        matched, total = matched + m, total + t
    assert total >= 10_000
    assert abs(matched / total - 0.7) <= 0.02


def _block_plan(units, unordered):
    return GtPlan((GtBlock(tuple(units), unordered=unordered),))


def test_brute_force_examples():
    ep = gen_episode(SynthesisConfig(n_units=(3, 3), unordered_block_prob=0.0, articulation_prob=0.0), np.random.default_rng(4))
    units = ep.gt_plan.units
    plan = _block_plan(units, True)
    preds = list(gt_to_predicted(plan).units)
    assert brute_force_tsr(preds, plan)
    for order in itertools.permutations(preds):
        assert brute_force_tsr(list(order), plan)
        assert match_episode_ordered(list(order), plan)[0]
    wrong = list(perturbed_planner(_block_plan(units[:1], False), 0.0, rng=np.random.default_rng(0)).units)
    for order in itertools.permutations(preds[1:] + wrong):
        assert not brute_force_tsr(list(order), plan)


def test_brute_force_size_guard():
    ep = gen_episode(SynthesisConfig(n_units=(9, 9)), np.random.default_rng(0))
    with pytest.raises(ValueError):
        brute_force_tsr([], ep.gt_plan)


def test_binomial_interval():
    lo, hi = binomial_interval(0.5, 10_000)
    assert lo == pytest.approx(0.5 - 2.5758 * 0.005, abs=1e-4) and hi == pytest.approx(0.5 + 2.5758 * 0.005, abs=1e-4)


def test_placeholder_image_draws_rectangles(tmp_path):
    from PIL import Image

    ep = gen_episode(SynthesisConfig(), np.random.default_rng(0))
    path = write_placeholder_image(ep, tmp_path / "img.png")
    img = Image.open(path)
    assert img.size == (ep.image_width, ep.image_height)
    box = ep.gt_plan.units[0].actions[0].grounding.to_pixels(ep.image_width, ep.image_height)
    assert img.getpixel(((box[0] + box[2]) // 2, (box[1] + box[3]) // 2)) != (200, 200, 200)
