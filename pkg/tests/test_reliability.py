import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_model
from macaudit.errors import ConfigError, RangeError, ShapeError
from macaudit.model import ForwardMode
from macaudit.numeric import RngStream
from macaudit.reliability import (
    PredictionRecord,
    ReliabilityConfig,
    mc_passes,
    predict_with_reliability,
    rcp_filter,
    read_predictions,
    reliability_score,
    reliability_scores,
    write_predictions,
)

unit = st.floats(0.0, 1.0)
alphas = st.sampled_from([0.0, 0.25, 0.5, 1.0])


def brute_force(x, alpha):
    m = len(x)
    centre = sum(x) / m
    spread = 0.0
    for a in x:
        for b in x:
            spread += abs(a - b)
    return (1 - alpha) * centre - alpha * spread / (m * m)


def test_examples():
    assert reliability_score([1.0, 1.0, 1.0]) == 0.5
    assert reliability_score([1.0, 0.0]) == 0.0
    assert reliability_score([0.9, 0.8, 0.7]) == pytest.approx(0.35556, abs=1e-5)


def test_empty():
    with pytest.raises(RangeError):
        reliability_score([])
    with pytest.raises(RangeError):
        reliability_scores(np.zeros((3, 0)))


def test_defaults():
    cfg = ReliabilityConfig()
    assert (cfg.m, cfg.alpha, cfg.prediction) == (100, 0.5, "mean")
    with pytest.raises(ConfigError):
        ReliabilityConfig(m=0)
    with pytest.raises(ConfigError):
        ReliabilityConfig(alpha=1.5)


@given(st.lists(unit, min_size=1, max_size=100), alphas)
def test_matches_double_loop(x, alpha):
    assert abs(reliability_score(x, alpha) - brute_force(x, alpha)) <= 1e-12


@given(unit, st.integers(1, 100), st.floats(0.0, 1.0))
def test_constant_input(c, m, alpha):
    assert reliability_score([c] * m, alpha) == pytest.approx((1 - alpha) * c, abs=1e-15)


@given(st.lists(unit, min_size=1, max_size=60), st.floats(0.0, 1.0), st.randoms(use_true_random=False))
def test_permutation_invariant(x, alpha, rnd):
    y = list(x)
    rnd.shuffle(y)
    assert reliability_score(y, alpha) == pytest.approx(reliability_score(x, alpha), abs=1e-14)


@given(st.lists(unit, min_size=1, max_size=100), st.floats(0.0, 1.0))
def test_bounds(x, alpha):
    r = reliability_score(x, alpha)
    assert r <= (1 - alpha) * max(x) + 1e-15
    assert -alpha / 2 - 1e-15 <= r <= 1 - alpha + 1e-15


def test_rowwise_agrees_with_scalar():
    x = np.random.default_rng(0).random((20, 7))
    np.testing.assert_array_equal(reliability_scores(x), [reliability_score(row) for row in x])


def test_two_pass_hand_example():
    passes = [np.array([[[0.9, 0.1]], [[0.7, 0.3]]])]
    (rec,) = predict_with_reliability(passes, ReliabilityConfig(m=2), ["s"], ["a"], keep_passes=True)
    assert rec.predicted_class == 0
    assert rec.passes == (0.9, 0.7)
    assert rec.reliability == pytest.approx(0.35, abs=1e-15)


@given(st.lists(unit, min_size=2, max_size=2), st.integers(1, 20), st.floats(0.0, 1.0))
def test_identical_passes(p0, m, alpha):
    p = np.array([p0[0], 1 - p0[0]])
    stack = np.broadcast_to(p, (m, 1, 2))
    (rec,) = predict_with_reliability([stack], ReliabilityConfig(m=m, alpha=alpha), ["s"], ["a"])
    assert rec.predicted_class == int(np.argmax(p))
    assert rec.reliability == pytest.approx((1 - alpha) * p[rec.predicted_class], abs=1e-15)


def test_ties_go_to_lowest_class():
    (rec,) = predict_with_reliability([np.full((3, 1, 3), 1 / 3)], ReliabilityConfig(m=3), ["s"], ["a"])
    assert rec.predicted_class == 0


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_pass_order_irrelevant(seed, m):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(m, 4, 3))
    stack = np.exp(z) / np.exp(z).sum(axis=2, keepdims=True)
    cfg = ReliabilityConfig(m=m)
    a = predict_with_reliability([stack], cfg, list("wxyz"), ["a"])
    b = predict_with_reliability([stack[rng.permutation(m)]], cfg, list("wxyz"), ["a"])
    for r, s in zip(a, b):
        assert r.predicted_class == s.predicted_class
        assert r.reliability == pytest.approx(s.reliability, abs=1e-14)


def test_deterministic_rule():
    stack = np.array([[[0.6, 0.4]], [[0.1, 0.9]]])
    cfg = ReliabilityConfig(m=2, prediction="deterministic")
    (rec,) = predict_with_reliability([stack], cfg, ["s"], ["a"], deterministic=[np.array([[0.9, 0.1]])])
    assert rec.predicted_class == 0
    assert rec.reliability == pytest.approx(reliability_score([0.6, 0.1]))
    with pytest.raises(ConfigError):
        predict_with_reliability([stack], cfg, ["s"], ["a"])


def test_shape_checks():
    with pytest.raises(ShapeError):
        predict_with_reliability([np.zeros((2, 3, 2))], ReliabilityConfig(m=2), ["a", "b"], ["x"])
    with pytest.raises(ShapeError):
        predict_with_reliability([np.zeros((2, 2, 2))], ReliabilityConfig(m=2), ["a", "b"], ["x", "y"])


def test_mc_passes_no_dropout_equals_infer():
    m = small_model(p_drop=0.0)
    x = np.random.default_rng(0).normal(size=(6, 5))
    stacks = mc_passes(m, x, ReliabilityConfig(m=4), RngStream(0))
    infer = m.predict(x)
    for stack, p in zip(stacks, infer):
        assert stack.shape == (4, 6, 2)
        for s in stack:
            np.testing.assert_allclose(s, p, rtol=0, atol=1e-15)


def test_mc_passes_deterministic_and_thread_independent():
    m = small_model()
    x = np.random.default_rng(1).normal(size=(5, 5))
    cfg = ReliabilityConfig(m=20)
    a = mc_passes(m, x, cfg, RngStream(3).split("mc"))
    b = mc_passes(m, x, cfg, RngStream(3).split("mc"), threads=4)
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s, t)
    assert not np.array_equal(a[0][0], a[0][1])
    # the config rejects m = 0 itself, so bypass it to reach the guard in mc_passes
    cfg = ReliabilityConfig(m=1)
    object.__setattr__(cfg, "m", 0)
    with pytest.raises(ConfigError):
        mc_passes(m, x, cfg, RngStream(0))


def test_mc_passes_leave_buffers_alone():
    m = small_model()
    m.forward(np.random.default_rng(2).normal(size=(8, 5)), ForwardMode.TRAIN, RngStream(0))
    before = {k: v.copy() for k, v in m.buffers.items()}
    mc_passes(m, np.ones((3, 5)), ReliabilityConfig(m=5), RngStream(1))
    for k in before:
        np.testing.assert_array_equal(before[k], m.buffers[k])


def recs(rels, ids=None):
    ids = ids or [f"s{i}" for i in range(len(rels))]
    return [PredictionRecord(i, "a", 0, r) for i, r in zip(ids, rels)]


def test_rcp_examples():
    kept = rcp_filter(recs([0.4, 0.1, 0.3, 0.2]), 0.5)
    assert sorted(r.reliability for r in kept) == [0.3, 0.4]
    assert len(rcp_filter(recs([0.4, 0.1, 0.3]), 1.0)) == 3
    tied = rcp_filter(recs([0.2] * 5, ids=["e", "c", "a", "d", "b"]), 0.5)
    assert [r.sample_id for r in tied] == ["a", "b", "c"]


def test_rcp_errors():
    with pytest.raises(RangeError):
        rcp_filter([], 0.5)
    with pytest.raises(RangeError):
        rcp_filter(recs([0.1]), 0.0)
    with pytest.raises(RangeError):
        rcp_filter(recs([0.1]), 1.5)


@given(st.lists(st.floats(-0.5, 1.0), min_size=1, max_size=80), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_rcp_monotone(rels, f1, f2):
    f1, f2 = sorted((f1, f2))
    records = recs(rels)
    small = {r.sample_id for r in rcp_filter(records, f1)}
    big = {r.sample_id for r in rcp_filter(records, f2)}
    assert small <= big
    assert len(big) == int(np.ceil(round(f2 * len(rels), 9)))
    # every kept record is at least as reliable as every dropped one
    kept = rcp_filter(records, f1)
    dropped = [r for r in records if r.sample_id not in small]
    if dropped:
        assert min(r.reliability for r in kept) >= max(r.reliability for r in dropped)


def test_predictions_csv_round_trip(tmp_path):
    records = [PredictionRecord("s1", "a", 1, 0.123456789012345), PredictionRecord("s2", "b", 0, -0.25)]
    write_predictions(records, tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "sample_id,attribute,predicted_class,reliability"
    assert read_predictions(tmp_path / "p.csv") == records
