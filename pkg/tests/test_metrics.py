import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgnetpose.errors import ConfigError, DataError, ShapeError
from sgnetpose.metrics import (METRIC_NAMES, MetricAccumulator, MetricsReport, best_of_k, corner_points,
                               per_sample_metrics)


def brute_force(preds, truth, corner="top-left"):
    """Loop-based accumulator over (sample, frame, coordinate)."""
    n, length = len(truth), len(truth[0])
    sums = dict.fromkeys(METRIC_NAMES, 0.0)
    for i in range(n):
        for h in (15, 30, 45):
            horizon = min(h, length)
            acc = 0.0
            for t in range(horizon):
                for c in range(4):
                    acc += (preds[i][t][c] - truth[i][t][c]) ** 2
            sums[f"mse_{h}"] += acc / (4 * horizon)
        sums["fmse"] += sum((preds[i][-1][c] - truth[i][-1][c]) ** 2 for c in range(4)) / 4

        def point(b):
            if corner == "top-left":
                return b[0], b[1]
            return (b[0] + b[2]) / 2, (b[1] + b[3]) / 2

        total = 0.0
        for t in range(length):
            (px, py), (gx, gy) = point(preds[i][t]), point(truth[i][t])
            total += ((px - gx) ** 2 + (py - gy) ** 2) / 2
        sums["cmse"] += total / length
        (px, py), (gx, gy) = point(preds[i][-1]), point(truth[i][-1])
        sums["cfmse"] += ((px - gx) ** 2 + (py - gy) ** 2) / 2
    return {k: v / n for k, v in sums.items()}


def random_boxes(rng, shape):
    lo = rng.uniform(0, 1500, shape + (2,))
    return np.concatenate([lo, lo + rng.uniform(10, 300, shape + (2,))], axis=-1)


def report_for(pred, truth, corner="top-left"):
    acc = MetricAccumulator(corner)
    acc.add(pred, truth)
    return acc.report()


def test_perfect_prediction_is_zero():
    truth = random_boxes(np.random.default_rng(0), (4, 45))
    rep = report_for(truth.copy(), truth)
    assert all(v == 0.0 for v in rep.values().values())


@pytest.mark.parametrize("corner", ["top-left", "centroid"])
def test_unit_offset_is_exactly_one(corner):
    truth = random_boxes(np.random.default_rng(1), (3, 45)).round()
    rep = report_for(truth + 1.0, truth, corner)
    assert rep.values() == dict.fromkeys(METRIC_NAMES, 1.0)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("corner", ["top-left", "centroid"])
def test_metrics_match_brute_force(seed, corner):
    rng = np.random.default_rng(seed)
    length = [45, 45, 20][seed % 3]
    truth = random_boxes(rng, (3, length))
    pred = truth + rng.normal(0, 20, truth.shape)
    got = report_for(pred, truth, corner).values()
    ref = brute_force(pred.tolist(), truth.tolist(), corner)
    for name in METRIC_NAMES:
        assert got[name] == pytest.approx(ref[name], rel=1e-6)


def test_horizons_cap_at_prediction_length():
    truth = random_boxes(np.random.default_rng(2), (2, 10))
    pred = truth + np.random.default_rng(3).normal(0, 5, truth.shape)
    rep = report_for(pred, truth)
    assert rep.mse_15 == rep.mse_30 == rep.mse_45


def test_best_of_k_uses_full_horizon_mse():
    truth = np.zeros((1, 4, 4))
    good_early = np.zeros((4, 4))
    good_early[3] = 10.0  # perfect early, bad final frame: full-horizon mse 25
    steady = np.full((4, 4), 4.0)  # mse 16 everywhere
    chosen, idx = best_of_k(np.stack([good_early, steady])[None], truth)
    assert idx.tolist() == [1]
    np.testing.assert_array_equal(chosen[0], steady)


def test_best_of_k_ties_pick_first():
    truth = np.zeros((1, 2, 4))
    preds = np.ones((1, 3, 2, 4))
    assert best_of_k(preds, truth)[1].tolist() == [0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_best_of_k_never_worse_with_more_candidates(seed, k):
    rng = np.random.default_rng(seed)
    truth = random_boxes(rng, (3, 8))
    preds = truth[:, None] + rng.normal(0, 10, (3, k + 2, 8, 4))
    small = report_for(best_of_k(preds[:, :k], truth)[0], truth).mse_45
    large = report_for(best_of_k(preds, truth)[0], truth).mse_45
    assert large <= small


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_are_order_invariant(seed):
    rng = np.random.default_rng(seed)
    truth = random_boxes(rng, (7, 12))
    pred = truth + rng.normal(0, 30, truth.shape)
    perm = rng.permutation(7)
    a = MetricAccumulator()
    a.add(pred[:3], truth[:3])
    a.add(pred[3:], truth[3:])
    b = MetricAccumulator()
    for i in perm:
        b.add(pred[i: i + 1], truth[i: i + 1])
    assert a.report().values() == b.report().values()


def test_empty_split_is_an_error():
    with pytest.raises(DataError, match="empty"):
        MetricAccumulator().report(split="val")


def test_shape_errors():
    with pytest.raises(ShapeError):
        per_sample_metrics(np.zeros((2, 3, 4)), np.zeros((2, 4, 4)))
    with pytest.raises(ShapeError):
        best_of_k(np.zeros((2, 0, 3, 4)), np.zeros((2, 3, 4)))
    with pytest.raises(ConfigError):
        corner_points(np.zeros(4), "bottom-right")


def test_csv_format():
    rep = MetricsReport(1.0, 2.5, 123456789.0, 0.1234567, 0.0, 3.0, count=5, config_hash="abc", split="test")
    lines = rep.to_csv().splitlines()
    assert lines[0] == "metric,value,unit,split,config_hash"
    assert lines[1] == "mse_15,1,px^2,test,abc"
    assert lines[3] == "mse_45,1.23457e+08,px^2,test,abc"
    assert lines[4] == "fmse,0.123457,px^2,test,abc"
    assert lines[5] == "cmse,0,px^2 top-left,test,abc"
    assert lines[-1] == "count,5,samples,test,abc"


def test_all_values_non_negative():
    rng = np.random.default_rng(5)
    truth = random_boxes(rng, (4, 45))
    rep = report_for(truth + rng.normal(0, 50, truth.shape), truth)
    assert all(v >= 0 and math.isfinite(v) for v in rep.values().values())
