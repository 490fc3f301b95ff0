import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advttt.diagnostics import auc, classify_convergence, corrupted_detection_auc
from advttt.errors import ContractError
from advttt.train import TrainHistory


def history_from(train_real, train_fake, val_real, val_fake, n=40, noise=0.03, seed=0):
    """Loss curves relaxing from 0.5 towards the given plateaus, with jitter."""
    r = np.random.default_rng(seed)
    h = TrainHistory()
    for e in range(n):
        mix = 1 - np.exp(-e / 6)
        for split, name, level in (
            ("train", "disc_real", train_real),
            ("train", "disc_fake", train_fake),
            ("val", "disc_real", val_real),
            ("val", "disc_fake", val_fake),
        ):
            h.add(e, split, name, 0.5 * (1 - mix) + level * mix + noise * r.standard_normal())
    return h


def test_equilibrium_shape():
    assert classify_convergence(history_from(1.0, 1.0, 1.0, 1.0)).mode == "equilibrium"


def test_memorization_shape():
    # training reals recognised, unseen reals pushed to the fake label
    assert classify_convergence(history_from(0.1, 0.1, 2.0, 0.0)).mode == "memorization"


def test_discriminative_and_undetermined():
    assert classify_convergence(history_from(0.0, 0.0, 0.0, 0.0, noise=0.0)).mode == "discriminative"
    assert classify_convergence(history_from(1.0, 1.0, 0.5, 1.6)).mode == "undetermined"


def test_forgetting_collapse_needs_probe():
    h = history_from(1.0, 1.0, 1.0, 1.0)
    assert classify_convergence(h, score_gap=0.01).mode == "forgetting-collapse"
    assert classify_convergence(h, score_gap=1.5).mode == "equilibrium"


def test_exact_points():
    for (vr, vf), mode in {(1.0, 1.0): "equilibrium", (2.0, 0.0): "memorization", (0.0, 0.0): "discriminative"}.items():
        h = TrainHistory()
        for e in range(10):
            h.add(e, "val", "disc_real", vr)
            h.add(e, "val", "disc_fake", vf)
        assert classify_convergence(h).mode == mode


def test_short_history():
    with pytest.raises(ContractError):
        classify_convergence(history_from(1, 1, 1, 1, n=5), window=10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_epochs_outside_window_do_not_matter(seed):
    h = history_from(1.0, 1.0, 1.0, 1.0, n=30, seed=seed)
    r = np.random.default_rng(seed)
    early = [rec for rec in h.records if rec[0] < 20]
    late = [rec for rec in h.records if rec[0] >= 20]
    values = r.permutation([rec[3] for rec in early])
    shuffled = TrainHistory([(e, s, n, float(v)) for (e, s, n, _), v in zip(early, values)] + late)
    assert classify_convergence(shuffled).to_json() == classify_convergence(h).to_json()


def test_auc_examples():
    assert auc(np.ones(20), -np.ones(20)) == 1.0
    assert auc(np.zeros(20), np.zeros(20)) == 0.5
    x = np.arange(30.0)
    assert auc(x[::2], x[1::2]) == pytest.approx(auc(np.exp(x[::2]), np.exp(x[1::2])))
    with pytest.raises(ContractError):
        auc([np.nan], [0.0])


def test_corrupted_detection_auc_with_callable():
    clean = np.zeros((20, 8, 8, 2), np.float32)
    clean[..., 0] = 1
    corrupted = clean.copy()
    corrupted[:, :2, :2] = [0, 1]
    disc = lambda m: -m[:, 1].sum(dim=(1, 2))  # noqa: E731
    assert corrupted_detection_auc(disc, clean, corrupted) == 1.0
    with pytest.raises(ContractError):
        corrupted_detection_auc(disc, clean[:5], corrupted)
