import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groundplan.segmentation import GripperSignal, Segment, SegmentationConfig, segment_signal
from groundplan.synth import gen_gripper_signal, random_segments


def seg(values, **kw):
    return [s.as_tuple() for s in segment_signal(GripperSignal(values), SegmentationConfig(**kw))]


def test_constant_open():
    assert seg([0.0] * 50) == []


def test_single_cycle():
    assert seg([0.0] * 10 + [1.0] * 10 + [0.0] * 10) == [(10, 20)]


def test_spike_between_cycles_ignored():
    values = [0.0] * 5 + [1.0] * 10 + [0.0] * 6 + [0.8] + [0.0] * 6 + [1.0] * 10 + [0.0] * 5
    assert seg(values) == [(5, 15), (28, 38)]


def test_trailing_close_dropped():
    assert seg([0.0] * 5 + [1.0] * 10) == []


def test_dwell_debounces_short_dip():
    values = [0.0] * 5 + [1.0] * 6 + [0.1, 0.1] + [1.0] * 6 + [0.0] * 5
    assert seg(values) == [(5, 19)]


def test_merge_when_gap_below_min_gap():
    values = [0.0] * 3 + [1.0] * 5 + [0.0] * 2 + [1.0] * 5 + [0.0] * 4
    # with dwell 2 the short reopen ends a segment, gap 0 < 3 merges them
    assert seg(values, min_dwell=2, min_gap=3) == [(3, 15)]
    assert seg(values, min_dwell=2, min_gap=0) == [(3, 8), (10, 15)]


def test_aperture_polarity_inverted():
    sig = GripperSignal.from_source([1.0] * 5 + [0.0] * 5 + [1.0] * 5, "aperture")
    assert [s.as_tuple() for s in segment_signal(sig)] == [(5, 10)]
    with pytest.raises(ValueError):
        GripperSignal.from_source([0.5], "sideways")


def test_invalid_inputs():
    with pytest.raises(ValueError):
        GripperSignal(())
    with pytest.raises(ValueError):
        GripperSignal((0.5, 1.5))
    with pytest.raises(ValueError):
        SegmentationConfig(theta_close=0.3, theta_open=0.7)
    with pytest.raises(ValueError):
        Segment(5, 5)


def crossing_oracle(values, thr=0.5):
    """Rising/falling edges of a clean 0/1 profile."""
    v = np.asarray(values) > thr
    edges = np.flatnonzero(np.diff(np.concatenate([[False], v, [False]]).astype(int)))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6))
def test_agrees_with_crossing_oracle_on_clean_profiles(seed, n):
    rng = np.random.default_rng(seed)
    segs, total = random_segments(rng, n, min_len=3, min_gap=3)
    sig = gen_gripper_signal(segs, total)
    assert seg(sig.values) == crossing_oracle(sig.values) == [s.as_tuple() for s in segs]


signals = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=120)


@settings(max_examples=300)
@given(signals)
def test_output_ordered_disjoint(values):
    out = seg(values)
    for s, e in out:
        assert s < e
    for (_, e0), (s1, _) in zip(out, out[1:]):
        assert e0 <= s1


@settings(max_examples=300)
@given(signals, st.floats(0.31, 1.0), st.floats(0.31, 1.0))
def test_raising_close_threshold_never_adds_segments(values, a, b):
    lo, hi = min(a, b), max(a, b)
    assert len(seg(values, theta_close=hi)) <= len(seg(values, theta_close=lo))


@settings(max_examples=300)
@given(signals, st.floats(0.0, 0.69), st.floats(0.0, 0.69))
def test_lowering_open_threshold_never_adds_segments(values, a, b):
    lo, hi = min(a, b), max(a, b)
    assert len(seg(values, theta_open=lo)) <= len(seg(values, theta_open=hi))


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.data())
def test_short_spikes_far_from_edges_ignored(seed, data):
    rng = np.random.default_rng(seed)
    segs, total = random_segments(rng, int(rng.integers(1, 5)), min_len=12, min_gap=12)
    values = list(gen_gripper_signal(segs, total).values)
    cfg = SegmentationConfig()
    edges = [b for s in segs for b in (s.s, s.e)]
    for _ in range(3):
        length = data.draw(st.integers(1, cfg.min_dwell - 1))
        start = data.draw(st.integers(0, total - length))
        if any(start - cfg.min_dwell <= b <= start + length + cfg.min_dwell for b in edges):
            continue
        for f in range(start, start + length):
            values[f] = 1.0 - values[f]
        # later spikes keep their distance from this one too
        edges += [start, start + length]
    assert seg(values) == [s.as_tuple() for s in segs]


def test_noisy_recovery_within_one_frame():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        segs, total = random_segments(rng, int(rng.integers(1, 5)))
        got = segment_signal(gen_gripper_signal(segs, total, 0.2, rng))
        if len(got) == len(segs) and all(
            abs(a.s - b.s) <= 1 and abs(a.e - b.e) <= 1 for a, b in zip(got, segs)
        ):
            hits += 1
    assert hits >= 99
