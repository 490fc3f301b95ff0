"""Alternating supervised / adversarial training with fake anchors and early stopping."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import losses
from .datagen import DataSplit, PatientVolume, augment_batch, corrupt_mask
from .errors import ConfigurationError, ContractError, DivergenceError
from .metrics import dice as dice_score
from .nets import ModelBundle

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 12
    max_epochs: int = 100
    val_patience: int = 10
    instance_noise_std: float = 0.1
    max_rot: float = math.pi / 2
    max_shift_frac: float = 0.1
    adv_weight_factor: float = 0.1
    gp_lambda: float = 10.0
    corrupted_fraction: float = 0.5
    patch_frac: float = 0.1
    flip_prob: float = 0.05
    n_swaps: int = 2
    recon_weight: float = 1.0
    seed: int = 0
    use_adaptor: bool = True
    use_smoothness: bool = True
    use_fake_anchors: bool = True
    use_patch_swap: bool = True
    use_binary_noise: bool = True
    use_adversarial: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("learning_rate, batch_size and max_epochs must be positive")
        if self.val_patience < 1:
            raise ConfigurationError("val_patience must be >= 1")
        if not 0.0 <= self.corrupted_fraction <= 1.0:
            raise ConfigurationError("corrupted_fraction must lie in [0, 1]")

    @property
    def effective_gp_lambda(self) -> float:
        return self.gp_lambda if self.use_smoothness else 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    """Long-format records ``(epoch, split, loss_name, value)``."""

    records: List[Tuple[int, str, str, float]] = field(default_factory=list)
    best_epoch: int = -1

    def add(self, epoch: int, split: str, name: str, value: float) -> None:
        if self.records and epoch < self.records[-1][0]:
            raise ContractError("epochs must be recorded in non-decreasing order")
        self.records.append((int(epoch), split, name, float(value)))

    @property
    def epochs(self) -> List[int]:
        return sorted({r[0] for r in self.records})

    def series(self, split: str, name: str) -> List[float]:
        by_epoch = {e: v for e, s, n, v in self.records if s == split and n == name}
        return [by_epoch[e] for e in sorted(by_epoch)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "split", "loss_name", "value"])
            for e, s, n, v in self.records:
                w.writerow([e, s, n, repr(v)])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        h = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                h.records.append((int(row["epoch"]), row["split"], row["loss_name"], float(row["value"])))
        h.records.sort(key=lambda r: r[0])
        return h


def should_stop(val_history: Sequence[float], patience: int) -> bool:
    """True iff the running minimum was not improved in the last ``patience`` entries."""
    if patience < 1:
        raise ConfigurationError("patience must be >= 1")
    if len(val_history) == 0:
        raise ContractError("empty validation history")
    best = int(np.argmin(val_history))  # first occurrence
    return len(val_history) - 1 - best >= patience


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------


def images_tensor(images: np.ndarray) -> torch.Tensor:
    """(n, h, w) -> (n, 1, h, w)."""
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))[:, None]


def masks_tensor(masks: np.ndarray) -> torch.Tensor:
    """(n, h, w, c) -> (n, c, h, w)."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(np.asarray(masks, np.float32), -1, 1)))


def masks_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().permute(0, 2, 3, 1).numpy()


def _stack_images(volumes: Sequence[PatientVolume]) -> torch.Tensor:
    return images_tensor(np.concatenate([v.images for v in volumes], axis=0))


def _stack_masks(volumes: Sequence[PatientVolume]) -> torch.Tensor:
    return masks_tensor(np.concatenate([v.masks for v in volumes], axis=0))


def check_bundle_matches(bundle: ModelBundle, config: TrainConfig) -> None:
    if bundle.config.use_adaptor != config.use_adaptor:
        raise ConfigurationError("bundle use_adaptor differs from train config; rebuild the bundle")
    if bundle.config.smooth != config.use_smoothness:
        raise ConfigurationError("bundle smoothness differs from train config; rebuild the bundle")


@dataclass
class Optimizers:
    generator: torch.optim.Optimizer
    discriminator: torch.optim.Optimizer


def make_optimizers(bundle: ModelBundle, config: TrainConfig) -> Optimizers:
    return Optimizers(
        torch.optim.Adam(bundle.generator_parameters(), lr=config.learning_rate, betas=(0.9, 0.999)),
        torch.optim.Adam(bundle.discriminator.parameters(), lr=config.learning_rate, betas=(0.9, 0.999)),
    )


def _finite(name: str, value: torch.Tensor, snapshot: dict) -> None:
    if not torch.isfinite(value).all():
        raise DivergenceError(f"non-finite {name} loss", snapshot={**snapshot, "loss": name})


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def train_step_supervised(
    bundle: ModelBundle, opt: Optimizers, x: torch.Tensor, y: torch.Tensor, config: TrainConfig
) -> losses.LossValue:
    """One Adam step of the weighted cross entropy on (adaptor, segmentor)."""
    if x.shape[0] == 0:
        raise ContractError("empty labelled batch")
    bundle.adaptor.train()
    bundle.segmentor.train()
    opt.generator.zero_grad(set_to_none=True)
    if bundle.is_causal:
        bundle.residual_encoder.train()
        bundle.decoder.train()
        xp, pred, _, rec = bundle.causal_forward(x)
        sup = losses.weighted_cross_entropy(pred, y)
        rec_loss = losses.mae_reconstruction(xp, rec)
        total = sup.value + config.recon_weight * rec_loss.value
        sup.components.update(rec_loss.components)
    else:
        pred = bundle.segment(x)
        sup = losses.weighted_cross_entropy(pred, y)
        total = sup.value
    _finite("supervised", total, {})
    total.backward()
    opt.generator.step()
    return sup


def build_fake_batch(
    pred: torch.Tensor,
    masks_for_corruption: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
) -> Tuple[torch.Tensor, int]:
    """Replace a ``corrupted_fraction`` share of the predictions with corrupted real masks."""
    n = pred.shape[0]
    n_corr = int(round(config.corrupted_fraction * n)) if config.use_fake_anchors else 0
    n_corr = min(n_corr, len(masks_for_corruption))
    if n_corr == 0:
        return pred, 0
    flip = config.flip_prob if config.use_binary_noise else 0.0
    swaps = config.n_swaps if config.use_patch_swap else 0
    corrupted = np.stack(
        [corrupt_mask(m, config.patch_frac, flip, swaps, rng=rng) for m in masks_for_corruption[:n_corr]]
    )
    fake = torch.cat([pred[: n - n_corr], masks_tensor(corrupted).to(pred)], dim=0)
    return fake, n_corr


def train_step_adversarial(
    bundle: ModelBundle,
    opt: Optimizers,
    x_unlabelled: torch.Tensor,
    unpaired_masks: np.ndarray,
    config: TrainConfig,
    sup_value: float,
    rng: np.random.Generator,
    generator: torch.Generator,
    corruption_masks: Optional[np.ndarray] = None,
) -> Tuple[losses.LossValue, losses.LossValue]:
    """Generator step (a·V_LS on adaptor/segmentor) then discriminator step.

    ``unpaired_masks`` are the real masks of the step; corrupted masks are made
    from ``corruption_masks`` (defaults to the same real masks).
    """
    if x_unlabelled.shape[0] == 0 or len(unpaired_masks) == 0:
        raise ContractError("adversarial step needs non-empty image and mask batches")
    disc = bundle.discriminator

    # generator: discriminator frozen and in eval mode so its buffers stay put
    disc.eval()
    for p in disc.parameters():
        p.requires_grad_(False)
    bundle.adaptor.train()
    bundle.segmentor.train()
    opt.generator.zero_grad(set_to_none=True)
    if bundle.is_causal:
        xp, pred, _, rec = bundle.causal_forward(x_unlabelled)
    else:
        pred = bundle.segment(x_unlabelled)
    gen = losses.lsgan_generator_loss(disc(pred))
    a = losses.dynamic_weight(sup_value, gen.item(), config.adv_weight_factor)
    total = a * gen.value
    gen.components["a"] = a
    if bundle.is_causal:
        rec_loss = losses.mae_reconstruction(xp, rec)
        total = total + config.recon_weight * rec_loss.value
        gen.components.update(rec_loss.components)
    _finite("generator", total, {"a": a})
    total.backward()
    opt.generator.step()
    for p in disc.parameters():
        p.requires_grad_(True)

    # discriminator: predictions are detached from (adaptor, segmentor)
    disc.train()
    opt.discriminator.zero_grad(set_to_none=True)
    real = masks_tensor(unpaired_masks)
    src = unpaired_masks if corruption_masks is None else corruption_masks
    fake, n_corr = build_fake_batch(pred.detach(), src, config, rng)
    aug = dict(
        noise_std=config.instance_noise_std,
        max_rot=config.max_rot,
        max_shift_frac=config.max_shift_frac,
        generator=generator,
    )
    real_aug = augment_batch(real, **aug)
    fake_aug = augment_batch(fake, **aug)
    d_loss = losses.lsgan_discriminator_loss(disc(real_aug), disc(fake_aug))
    total = d_loss.value
    lam = config.effective_gp_lambda
    if lam > 0:
        k = min(real_aug.shape[0], fake_aug.shape[0])
        gp = losses.gradient_penalty(disc, real_aug[:k], fake_aug[:k], lam=lam, generator=generator)
        total = total + gp.value
        d_loss.components.update(gp.components)
    d_loss.components["n_corrupted"] = n_corr
    _finite("discriminator", total, {})
    total.backward()
    opt.discriminator.step()
    return gen, d_loss


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict(bundle: ModelBundle, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode soft masks ``(n, h, w, c)`` for ``(n, h, w)`` images."""
    bundle.eval()
    x = images_tensor(images)
    out = [bundle.segment(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return masks_numpy(torch.cat(out))


@torch.no_grad()
def validation_losses(bundle: ModelBundle, val: Sequence[PatientVolume]) -> Dict[str, float]:
    """Supervised loss, discriminator per-label errors and foreground Dice on ``val``.

    ``disc_real`` / ``disc_fake`` are E[(d - 1)²] and E[(d + 1)²] (no ½ factor),
    so an always-zero discriminator reads 1.0 on both.
    """
    bundle.eval()
    x = _stack_images(val)
    y = _stack_masks(val)
    pred = bundle.segment(x)
    sup = losses.weighted_cross_entropy(pred, y).item()
    d_real = bundle.discriminator(y)
    d_fake = bundle.discriminator(pred)
    pred_np, y_np = masks_numpy(pred), masks_numpy(y)
    fg = float(np.mean([dice_score(p, t)[1:].mean() for p, t in zip(pred_np, y_np)]))
    return {
        "supervised": sup,
        "disc_real": float(((d_real - 1) ** 2).mean()),
        "disc_fake": float(((d_fake + 1) ** 2).mean()),
        "dice": fg,
    }


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def fit(
    bundle: ModelBundle,
    train_split: DataSplit,
    val_split: Sequence[PatientVolume],
    config: TrainConfig,
    progress: bool = False,
) -> Tuple[ModelBundle, TrainHistory]:
    """Alternate supervised and adversarial steps; restore the best-validation weights."""
    check_bundle_matches(bundle, config)
    if not train_split.labelled:
        raise ContractError("training split has no labelled patients")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)

    x_lab = _stack_images(train_split.labelled)
    y_lab = _stack_masks(train_split.labelled)
    unl = train_split.unlabelled or train_split.labelled
    x_unl = _stack_images(unl)
    m_pool = np.asarray(train_split.unpaired_masks, dtype=np.float32)
    bs = config.batch_size
    n_iter = int(math.ceil(max(len(x_lab), len(x_unl)) / bs))

    opt = make_optimizers(bundle, config)
    history = TrainHistory()
    val_hist: List[float] = []
    best_state = copy.deepcopy(bundle.state_dict())
    best_val = math.inf

    def cycle(perm, i):
        idx = np.arange(i * bs, (i + 1) * bs) % len(perm)
        return perm[idx]

    for epoch in range(config.max_epochs):
        p_lab = rng.permutation(len(x_lab))
        p_unl = rng.permutation(len(x_unl))
        p_msk = rng.permutation(len(m_pool))
        p_cor = rng.permutation(len(m_pool))
        acc: Dict[str, List[float]] = {}
        for it in range(n_iter):
            snapshot = {"epoch": epoch, "iteration": it}
            i_lab = cycle(p_lab, it)
            try:
                sup = train_step_supervised(bundle, opt, x_lab[i_lab], y_lab[i_lab], config)
                acc.setdefault("supervised", []).append(sup.item())
                for k, v in sup.components.items():
                    if k != "wce":
                        acc.setdefault(k, []).append(v)
                if config.use_adversarial:
                    g, d = train_step_adversarial(
                        bundle,
                        opt,
                        x_unl[cycle(p_unl, it)],
                        m_pool[cycle(p_msk, it)],
                        config,
                        sup.item(),
                        rng,
                        gen,
                        corruption_masks=m_pool[cycle(p_cor, it)],
                    )
                    acc.setdefault("generator", []).append(g.item())
                    acc.setdefault("a", []).append(g.components["a"])
                    acc.setdefault("disc_real", []).append(2 * d.components["real"])
                    acc.setdefault("disc_fake", []).append(2 * d.components["fake"])
                    if "gp" in d.components:
                        acc.setdefault("gp", []).append(d.components["gp"])
            except DivergenceError as err:
                err.snapshot.update(snapshot)
                err.snapshot["history"] = history
                raise
        for name, vals in acc.items():
            history.add(epoch, "train", name, float(np.mean(vals)))
        val = validation_losses(bundle, val_split)
        if not math.isfinite(val["supervised"]):
            raise DivergenceError("non-finite validation loss", {"epoch": epoch, "history": history})
        for name, v in val.items():
            history.add(epoch, "val", name, v)
        val_hist.append(val["supervised"])
        if val["supervised"] < best_val:
            best_val = val["supervised"]
            best_state = copy.deepcopy(bundle.state_dict())
            history.best_epoch = epoch
        if progress:
            log.info("epoch %d sup %.4f val %.4f dice %.3f", epoch, np.mean(acc["supervised"]), val["supervised"], val["dice"])
        if should_stop(val_hist, config.val_patience):
            break
    bundle.load_state_dict(best_state)
    bundle.eval()
    return bundle, history
