import copy

import numpy as np
import pytest
import torch

from advttt.errors import ConfigurationError, ContractError
from advttt.nets import ModelConfig, init_models, parameter_hash
from advttt.ttt import (
    TTTConfig,
    evaluate_ttt_experiment,
    last_improvement,
    stopping_check,
    ttt_adapt,
    ttt_continual,
    ttt_loss,
)
from conftest import TINY_MODEL

FAST = dict(patience=3, max_iter=8, learning_rate=1e-2)


def run_rule(trace, patience, max_iter, min_delta=0.0):
    """Feed a trace one step at a time; return how many entries were consumed."""
    for k in range(1, len(trace) + 1):
        if stopping_check(trace[:k], patience, max_iter, min_delta):
            return k
    return len(trace)


def test_stopping_min_then_flat():
    trace = [5.0, 4.0, 3.0, 2.0] + [2.0] * 500
    assert run_rule(trace, 200, 1000) == 4 + 200


def test_stopping_late_minimum_hits_cap():
    trace = list(np.linspace(10, 1, 1000)) + [0.0] * 50
    assert run_rule(trace, 200, 1000) == 1000


def test_stopping_patience_equal_to_cap():
    trace = [1.0] + [2.0] * 2000
    assert run_rule(trace, 1000, 1000) == 1000


def test_stopping_min_delta():
    trace = [1.0, 0.9995, 0.999, 0.5, 0.4999]
    assert last_improvement(trace, 1e-3) == 3
    assert last_improvement(trace, 0.0) == 4
    with pytest.raises(ContractError):
        stopping_check([], 1, 2)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TTTConfig(patience=5, max_iter=4)
    with pytest.raises(ConfigurationError):
        TTTConfig(mode="vae")
    assert (TTTConfig().patience, TTTConfig().max_iter) == (200, 1000)


def test_isolation_and_best_loss(tiny_bundle, tiny_data):
    subject = tiny_data[2][0]
    frozen = {k: parameter_hash(m) for k, m in tiny_bundle.modules_by_role().items()}
    res = ttt_adapt(tiny_bundle, subject, TTTConfig(**FAST))
    after = {k: parameter_hash(m) for k, m in tiny_bundle.modules_by_role().items()}
    assert after == frozen  # adaptor restored in independent mode too
    assert res.best_loss == min(res.trace)
    assert res.best_step == int(np.argmin(res.trace))
    assert 1 <= res.n_iter == len(res.trace) <= FAST["max_iter"]
    assert res.best_mask.shape == subject.masks.shape


def test_kept_step_is_last_significant_improvement(tiny_bundle, tiny_data):
    subject = tiny_data[2][0]
    res = ttt_adapt(tiny_bundle, subject, TTTConfig(**{**FAST, "min_delta": 1e-2}))
    assert res.best_step == last_improvement(res.trace, 1e-2)
    assert res.best_loss == res.trace[res.best_step]


def test_masks_are_not_read(tiny_bundle, tiny_data):
    subject = tiny_data[2][1]
    a = ttt_adapt(tiny_bundle, subject, TTTConfig(**FAST))
    b = ttt_adapt(tiny_bundle, subject.without_masks(), TTTConfig(**FAST))
    assert a.trace == b.trace and np.array_equal(a.best_mask, b.best_mask)


def test_initial_mask_is_plain_inference(tiny_bundle, tiny_data):
    from advttt.train import predict

    subject = tiny_data[2][0]
    res = ttt_adapt(tiny_bundle, subject, TTTConfig(**FAST))
    assert np.allclose(res.initial_mask, predict(tiny_bundle, subject.images), atol=1e-6)


def test_continual_persists_adaptor(tiny_bundle, tiny_data):
    test = tiny_data[2][:3]
    seg, disc = parameter_hash(tiny_bundle.segmentor), parameter_hash(tiny_bundle.discriminator)
    ada = parameter_hash(tiny_bundle.adaptor)
    results = ttt_continual(tiny_bundle, test, TTTConfig(**FAST, continual=True))
    assert len(results) == 3
    assert parameter_hash(tiny_bundle.adaptor) != ada
    assert (parameter_hash(tiny_bundle.segmentor), parameter_hash(tiny_bundle.discriminator)) == (seg, disc)
    with pytest.raises(ConfigurationError):
        ttt_continual(tiny_bundle, test, TTTConfig(**FAST))


def test_continual_carry(tiny_bundle, tiny_data):
    subject = tiny_data[2][0]
    for carry in ("best", "final"):
        bundle = copy.deepcopy(tiny_bundle)
        res = ttt_adapt(bundle, subject, TTTConfig(**FAST, continual=True, carry=carry))
        kept = all(torch.equal(v, res.best_adaptor_state[k]) for k, v in bundle.adaptor.state_dict().items())
        assert kept == (carry == "best" or res.best_step == res.n_iter - 1)
    with pytest.raises(ConfigurationError):
        TTTConfig(carry="average")


def test_slice_unit(tiny_bundle, tiny_data):
    subject = tiny_data[2][0]
    res = ttt_adapt(tiny_bundle, subject, TTTConfig(**FAST, unit="slice"))
    assert len(res.per_slice) == subject.n_slices
    assert res.best_mask.shape == subject.masks.shape


def test_reconstruction_needs_decoder(tiny_bundle, tiny_causal, tiny_data):
    x = torch.from_numpy(tiny_data[2][0].images[:, None])
    with pytest.raises(ConfigurationError):
        ttt_loss(tiny_bundle, x, "reconstruction")
    both = ttt_loss(tiny_causal.eval(), x, "both")
    parts = ttt_loss(tiny_causal, x, "adversarial") + ttt_loss(tiny_causal, x, "reconstruction")
    assert both.item() == pytest.approx(parts.item(), rel=1e-6)


def test_causal_isolation(tiny_causal, tiny_data):
    frozen = {k: parameter_hash(m) for k, m in tiny_causal.modules_by_role().items() if k != "adaptor"}
    ttt_adapt(tiny_causal, tiny_data[2][0], TTTConfig(**FAST, mode="both", continual=True))
    after = {k: parameter_hash(m) for k, m in tiny_causal.modules_by_role().items() if k != "adaptor"}
    assert after == frozen


def test_no_adaptor_is_rejected(tiny_data):
    b = init_models(ModelConfig(**TINY_MODEL, use_adaptor=False), 0)
    with pytest.raises(ConfigurationError):
        ttt_adapt(b, tiny_data[2][0], TTTConfig(**FAST))


def test_experiment_table(tiny_bundle, tiny_data):
    exp = evaluate_ttt_experiment(tiny_bundle, tiny_data[2], TTTConfig(**FAST), n_boot=200)
    rows = exp.subject_rows()
    assert len(rows) == len(tiny_data[2]) == 4
    assert {"n_iter", "best_loss", "dice_before", "dice_after", "dice_delta"} <= set(rows[0])
    assert set(exp.summary.stats) == {"before", "after"}
