import numpy as np
import pytest
import torch

from advttt.errors import ConfigurationError, ContractError
from advttt.nets import ModelConfig, init_models, parameter_hash
from advttt.train import (
    TrainConfig,
    TrainHistory,
    build_fake_batch,
    fit,
    make_optimizers,
    masks_tensor,
    should_stop,
    train_step_adversarial,
    train_step_supervised,
    validation_losses,
)
from conftest import TINY_MODEL


def test_should_stop():
    assert not should_stop([3, 2, 1], 1)
    assert should_stop([1, 2, 3], 2)
    assert not should_stop([1, 2, 3], 3)
    assert should_stop([1, 1, 1], 2)  # ties do not renew the minimum
    with pytest.raises(ConfigurationError):
        should_stop([1.0], 0)
    with pytest.raises(ContractError):
        should_stop([], 3)


def test_history_csv_round_trip(tmp_path):
    h = TrainHistory()
    h.add(0, "train", "disc_real", 0.1 + 0.2)
    h.add(0, "val", "disc_real", 1.0)
    h.add(1, "val", "disc_real", 1.0 / 3)
    h.to_csv(tmp_path / "h.csv")
    back = TrainHistory.from_csv(tmp_path / "h.csv")
    assert back.records == h.records
    assert back.series("val", "disc_real") == [1.0, 1.0 / 3]
    with pytest.raises(ContractError):
        h.add(0, "val", "x", 0.0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"lr": 1e-3})
    assert TrainConfig(use_smoothness=False).effective_gp_lambda == 0.0
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.learning_rate, cfg.instance_noise_std) == (12, 1e-4, 0.1)


def test_bundle_toggles_must_match(tiny_bundle, tiny_data):
    with pytest.raises(ConfigurationError):
        fit(tiny_bundle, tiny_data[0], tiny_data[1], TrainConfig(use_smoothness=False, max_epochs=1))


def test_supervised_step_leaves_discriminator(tiny_bundle, tiny_data):
    split = tiny_data[0]
    x = torch.from_numpy(split.labelled[0].images[:, None])
    y = masks_tensor(split.labelled[0].masks)
    d0, s0 = parameter_hash(tiny_bundle.discriminator), parameter_hash(tiny_bundle.segmentor)
    opt = make_optimizers(tiny_bundle, TrainConfig())
    loss = train_step_supervised(tiny_bundle, opt, x, y, TrainConfig())
    assert np.isfinite(loss.item())
    assert parameter_hash(tiny_bundle.discriminator) == d0
    assert parameter_hash(tiny_bundle.segmentor) != s0


def test_adversarial_step_updates_both_sides(tiny_bundle, tiny_data):
    split = tiny_data[0]
    cfg = TrainConfig()
    opt = make_optimizers(tiny_bundle, cfg)
    x = torch.from_numpy(split.unlabelled[0].images[:, None])
    d0, s0 = parameter_hash(tiny_bundle.discriminator), parameter_hash(tiny_bundle.segmentor)
    g, d = train_step_adversarial(
        tiny_bundle, opt, x, split.unpaired_masks[:2], cfg, 1.0, np.random.default_rng(0), torch.Generator().manual_seed(0)
    )
    assert g.components["a"] > 0 and "gp" in d.components
    assert d.components["n_corrupted"] == 1
    assert parameter_hash(tiny_bundle.discriminator) != d0
    assert parameter_hash(tiny_bundle.segmentor) != s0


def test_fake_batch_composition(tiny_data):
    masks = tiny_data[0].unpaired_masks[:4]
    pred = masks_tensor(masks) * 0.5
    fake, n = build_fake_batch(pred, masks, TrainConfig(corrupted_fraction=0.5), np.random.default_rng(0))
    assert n == 2 and fake.shape == pred.shape
    assert torch.equal(fake[:2], pred[:2])
    _, n = build_fake_batch(pred, masks, TrainConfig(use_fake_anchors=False), np.random.default_rng(0))
    assert n == 0


def test_fit_is_reproducible_and_restores_best(tiny_data):
    split, val, _ = tiny_data
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=3, val_patience=5, seed=1)
    runs = []
    for _ in range(2):
        b, h = fit(init_models(ModelConfig(**TINY_MODEL), 0), split, val, cfg)
        runs.append((b, h))
    (b1, h1), (b2, h2) = runs
    assert h1.records == h2.records
    assert parameter_hash(b1) == parameter_hash(b2)
    best = h1.best_epoch
    assert h1.series("val", "supervised")[best] == min(h1.series("val", "supervised"))
    assert validation_losses(b1, val)["supervised"] == pytest.approx(h1.series("val", "supervised")[best], abs=1e-6)
    names = {n for _, s, n, _ in h1.records if s == "train"}
    assert {"supervised", "generator", "disc_real", "disc_fake", "a", "gp"} <= names
