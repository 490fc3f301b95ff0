import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advttt.errors import ContractError
from advttt.metrics import MetricRecord, aggregate, bootstrap_ttest, dice, evaluate_volume, hausdorff, iou
from conftest import random_onehot


def brute_dice(a, b, k):
    pa = {(i, j) for i in range(a.shape[0]) for j in range(a.shape[1]) if a[i, j, k]}
    pb = {(i, j) for i in range(b.shape[0]) for j in range(b.shape[1]) if b[i, j, k]}
    if not pa and not pb:
        return 1.0
    return 2 * len(pa & pb) / (len(pa) + len(pb))


def brute_iou(a, b, k):
    pa = {(i, j) for i in range(a.shape[0]) for j in range(a.shape[1]) if a[i, j, k]}
    pb = {(i, j) for i in range(b.shape[0]) for j in range(b.shape[1]) if b[i, j, k]}
    if not pa and not pb:
        return 1.0
    return len(pa & pb) / len(pa | pb)


def brute_hausdorff(a, b, k):
    pa = [(i, j) for i in range(a.shape[0]) for j in range(a.shape[1]) if a[i, j, k]]
    pb = [(i, j) for i in range(b.shape[0]) for j in range(b.shape[1]) if b[i, j, k]]
    if not pa and not pb:
        return 0.0
    if not pa or not pb:
        return float(max(a.shape[:2]))
    d = lambda p, q: math.hypot(p[0] - q[0], p[1] - q[1])  # noqa: E731
    return max(max(min(d(p, q) for q in pb) for p in pa), max(min(d(p, q) for q in pa) for p in pb))


def test_against_brute_force_oracles(rng):
    for _ in range(200):
        c = int(rng.integers(2, 5))
        a, b = random_onehot(rng, (8, 8), c), random_onehot(rng, (8, 8), c)
        d, j, h = dice(a, b), iou(a, b), hausdorff(a, b)
        for k in range(c):
            assert d[k] == brute_dice(a, b, k)
            assert j[k] == brute_iou(a, b, k)
            assert h[k] == brute_hausdorff(a, b, k)
            assert abs(d[k] - 2 * j[k] / (1 + j[k])) < 1e-12


def test_single_pixels_hausdorff():
    a = np.zeros((8, 8, 2), np.float32)
    b = np.zeros((8, 8, 2), np.float32)
    a[..., 0] = b[..., 0] = 1
    a[0, 0] = [0, 1]
    b[3, 4] = [0, 1]
    assert hausdorff(a, b)[1] == 5.0


def test_empty_masks():
    bg = np.zeros((6, 9, 2), np.float32)
    bg[..., 0] = 1
    one = bg.copy()
    one[2, 2] = [0, 1]
    assert hausdorff(one, bg)[1] == 9.0
    assert hausdorff(bg, bg)[1] == 0.0
    assert dice(bg, bg)[1] == 1.0 and iou(bg, bg)[1] == 1.0


def test_soft_masks_are_hardened(rng):
    a = random_onehot(rng, (8, 8), 3)
    soft = 0.6 * a + 0.4 / 3
    assert np.array_equal(dice(soft, a), np.ones(3))


def test_shape_checks():
    with pytest.raises(ContractError):
        dice(np.zeros((4, 4, 2)), np.zeros((4, 5, 2)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 4))
def test_symmetry_and_bounds(seed, c):
    r = np.random.default_rng(seed)
    a, b = random_onehot(r, (7, 5), c), random_onehot(r, (7, 5), c)
    for f in (dice, iou, hausdorff):
        assert np.array_equal(f(a, b), f(b, a))
    assert np.all((0 <= dice(a, b)) & (dice(a, b) <= 1))
    assert np.all(iou(a, b) <= dice(a, b) + 1e-12)
    assert np.array_equal(dice(a, a), np.ones(c))
    assert np.array_equal(hausdorff(a, a), np.zeros(c))


def test_evaluate_volume_averages_slices(rng):
    pred = random_onehot(rng, (3, 8, 8), 3)
    tgt = random_onehot(rng, (3, 8, 8), 3)
    r = evaluate_volume(pred, tgt, "p", "before")
    assert np.allclose(r.dice, np.mean([dice(p, t) for p, t in zip(pred, tgt)], axis=0))
    assert r.mean_dice == pytest.approx(r.dice[1:].mean())
    assert len(r.rows()) == 3


def test_bootstrap_ttest_clear_effect_and_null():
    before = np.linspace(0.5, 0.6, 20)
    assert bootstrap_ttest(before, before + 0.05 + 0.001 * np.sin(np.arange(20))) < 0.01
    r = np.random.default_rng(0)
    x = r.normal(size=30)
    p_null = bootstrap_ttest(x, x + r.normal(scale=1.0, size=30), n_boot=2000)
    assert 0.0 <= p_null <= 1.0
    assert bootstrap_ttest(before, before) == 1.0


def test_bootstrap_is_deterministic_and_needs_samples():
    a, b = np.arange(6.0), np.arange(6.0) + [0.1, 0.3, 0.0, 0.2, 0.4, 0.1]
    assert bootstrap_ttest(a, b, seed=3) == bootstrap_ttest(a, b, seed=3)
    with pytest.raises(ContractError):
        bootstrap_ttest([1, 2], [2, 3])


def test_aggregate_is_order_free():
    recs = []
    for i in range(6):
        for phase, off in (("before", 0.0), ("after", 0.1)):
            d = np.array([1.0, 0.5 + off + 0.01 * i, 0.4 + off])
            recs.append(MetricRecord(f"p{i}", phase, d, d / 2, np.array([0.0, 3.0, 4.0])))
    s1 = aggregate(recs, n_boot=500)
    s2 = aggregate(recs[::-1], n_boot=500)
    assert s1.to_json() == s2.to_json()
    assert s1.deltas["dice"] == pytest.approx(0.1)
    assert "dice" in s1.p_values
    vals = [r.mean_dice for r in recs if r.phase == "before"]
    assert s1.stats["before"]["dice"]["std"] == pytest.approx(np.std(vals))
