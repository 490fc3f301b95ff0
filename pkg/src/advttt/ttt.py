"""Test-time training of the adaptor against the frozen discriminator (and decoder)."""

from __future__ import annotations

import copy
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import losses
from .datagen import PatientVolume
from .errors import ConfigurationError, ContractError
from .metrics import MetricRecord, Summary, aggregate, evaluate_volume
from .nets import ModelBundle
from .train import images_tensor, masks_numpy

log = logging.getLogger(__name__)

MODES = ("adversarial", "reconstruction", "both")
UNITS = ("patient", "slice")
CARRY = ("best", "final")


@dataclass
class TTTConfig:
    patience: int = 200
    max_iter: int = 1000
    mode: str = "adversarial"
    unit: str = "patient"
    continual: bool = False
    learning_rate: float = 1e-4
    min_delta: float = 0.0
    carry: str = "best"  # continual mode: adaptor state handed to the next subject
    seed: int = 0

    def __post_init__(self):
        if self.min_delta < 0:
            raise ConfigurationError("min_delta must be >= 0")
        if not 0 < self.patience <= self.max_iter:
            raise ConfigurationError(f"need 0 < patience <= max_iter, got {self.patience}, {self.max_iter}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.unit not in UNITS:
            raise ConfigurationError(f"unit must be one of {UNITS}, got {self.unit!r}")
        if self.carry not in CARRY:
            raise ConfigurationError(f"carry must be one of {CARRY}, got {self.carry!r}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TTTConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown ttt config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TTTResult:
    patient_id: str
    best_mask: np.ndarray  # (n, h, w, c)
    best_loss: float
    n_iter: int
    trace: List[float]
    initial_mask: np.ndarray
    best_step: int = 0
    diverged: bool = False
    best_adaptor_state: Optional[Dict[str, torch.Tensor]] = None
    per_slice: Optional[List["TTTResult"]] = None

    def record(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "n_iter": self.n_iter,
            "best_step": self.best_step,
            "best_loss": self.best_loss,
            "initial_loss": self.trace[0] if self.trace else float("nan"),
            "diverged": self.diverged,
        }


def last_improvement(trace: Sequence[float], min_delta: float = 0.0) -> int:
    """Index of the last entry that beat the running reference minimum by more than ``min_delta``."""
    ref, last = trace[0], 0
    for i in range(1, len(trace)):
        if trace[i] < ref - min_delta:
            ref, last = trace[i], i
    return last


def stopping_check(trace: Sequence[float], patience: int, max_iter: int, min_delta: float = 0.0) -> bool:
    """Stop at the iteration cap or when the running minimum is ``patience`` entries old.

    With ``min_delta = 0`` any strict decrease renews the minimum.
    """
    if len(trace) == 0:
        raise ContractError("empty loss trace")
    if len(trace) >= max_iter:
        return True
    if min_delta == 0.0:
        best = int(np.argmin(trace))  # first occurrence
    else:
        best = last_improvement(trace, min_delta)
    return len(trace) - 1 - best >= patience


def ttt_loss(bundle: ModelBundle, x: torch.Tensor, mode: str, return_mask: bool = False):
    """Label-free adaptation loss on a batch of images ``(n, 1, h, w)``.

    adversarial: ½·E[d(Σ∘Ω(x))²]; reconstruction: E|Ω(x) - decoder(encoder(Ω(x)))|;
    both: their unweighted sum.
    """
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    if mode != "adversarial" and not bundle.is_causal:
        raise ConfigurationError(f"mode {mode!r} needs a causal bundle with a decoder")
    if bundle.is_causal:
        xp, mask, _, rec = bundle.causal_forward(x)
    else:
        mask = bundle.segment(x)
    total = x.new_zeros(())
    if mode in ("adversarial", "both"):
        total = total + losses.lsgan_generator_loss(bundle.discriminator(mask)).value
    if mode in ("reconstruction", "both"):
        total = total + losses.mae_reconstruction(xp, rec).value
    return (total, mask) if return_mask else total


@contextmanager
def _frozen_except_adaptor(bundle: ModelBundle):
    """Inference mode for everything; gradients only for the adaptor."""
    flags = {p: p.requires_grad for p in bundle.parameters()}
    was_training = bundle.training
    bundle.eval()
    for p in bundle.parameters():
        p.requires_grad_(False)
    for p in bundle.adaptor.parameters():
        p.requires_grad_(True)
    try:
        yield
    finally:
        for p, f in flags.items():
            p.requires_grad_(f)
        bundle.train(was_training)


class AdaptationState:
    """Adaptor optimizer carried across subjects in continual mode."""

    def __init__(self, bundle: ModelBundle, config: TTTConfig):
        self.optimizer = torch.optim.Adam(bundle.adaptor.parameters(), lr=config.learning_rate, betas=(0.9, 0.999))


def _adapt_unit(bundle, x, config: TTTConfig, optimizer, patient_id: str) -> TTTResult:
    trace: List[float] = []
    best = math.inf
    best_mask = initial = None
    best_step = 0
    best_state = None
    diverged = False
    for step in range(config.max_iter):
        optimizer.zero_grad(set_to_none=True)
        loss, mask = ttt_loss(bundle, x, config.mode, return_mask=True)
        value = float(loss.detach())
        if not math.isfinite(value):
            log.warning("%s: non-finite TTT loss at step %d; keeping best-so-far", patient_id, step)
            diverged = True
            break
        trace.append(value)
        if initial is None:
            initial = masks_numpy(mask)
        # same improvement notion as the stopping rule: gains within min_delta are ties
        if value < best - config.min_delta or step == 0:
            best, best_step = value, step
            best_mask = masks_numpy(mask)
            best_state = copy.deepcopy(bundle.adaptor.state_dict())
        if stopping_check(trace, config.patience, config.max_iter, config.min_delta):
            break
        loss.backward()
        optimizer.step()
    if config.continual and config.carry == "best" and best_state is not None:
        bundle.adaptor.load_state_dict(best_state)  # optimizer moments stay as they ended
    if initial is None:  # diverged on the very first step
        with torch.no_grad():
            initial = best_mask = masks_numpy(bundle.segment(x))
    return TTTResult(
        patient_id=patient_id,
        best_mask=best_mask,
        best_loss=best,
        n_iter=len(trace),
        trace=trace,
        initial_mask=initial,
        best_step=best_step,
        diverged=diverged,
        best_adaptor_state=best_state,
    )


def _run(bundle: ModelBundle, subject: PatientVolume, config: TTTConfig, state: AdaptationState) -> TTTResult:
    x = images_tensor(subject.images)
    if config.unit == "patient":
        return _adapt_unit(bundle, x, config, state.optimizer, subject.patient_id)
    start = copy.deepcopy(bundle.adaptor.state_dict())
    parts = []
    for k in range(len(x)):
        if not config.continual and k > 0:
            bundle.adaptor.load_state_dict(start)
            state = AdaptationState(bundle, config)
        parts.append(_adapt_unit(bundle, x[k : k + 1], config, state.optimizer, f"{subject.patient_id}/{k}"))
    return TTTResult(
        patient_id=subject.patient_id,
        best_mask=np.concatenate([p.best_mask for p in parts]),
        best_loss=float(np.mean([p.best_loss for p in parts])),
        n_iter=int(round(np.mean([p.n_iter for p in parts]))),
        trace=[],
        initial_mask=np.concatenate([p.initial_mask for p in parts]),
        best_step=int(round(np.mean([p.best_step for p in parts]))),
        diverged=any(p.diverged for p in parts),
        per_slice=parts,
    )


def ttt_adapt(bundle: ModelBundle, subject: PatientVolume, config: TTTConfig, state: Optional[AdaptationState] = None) -> TTTResult:
    """Adapt the adaptor to one subject; masks on ``subject`` are never read.

    The kept prediction is the first-occurrence minimum of the loss trace. With
    ``min_delta > 0`` gains of at most ``min_delta`` count as ties, so the kept
    step is the last significant improvement and ``best_loss <= min(trace) + min_delta``.

    Without ``config.continual`` the adaptor is restored afterwards, so the
    bundle leaves unchanged. With it, the adapted weights stay in place.
    """
    if not bundle.config.use_adaptor:
        raise ConfigurationError("bundle has no adaptor to tune (use_adaptor=false)")
    torch.manual_seed(config.seed)
    initial_state = copy.deepcopy(bundle.adaptor.state_dict())
    if state is None or not config.continual:
        state = AdaptationState(bundle, config)
    with _frozen_except_adaptor(bundle):
        result = _run(bundle, subject, config, state)
    if not config.continual:
        bundle.adaptor.load_state_dict(initial_state)
    return result


def ttt_continual(
    bundle: ModelBundle,
    subjects: Sequence[PatientVolume],
    config: TTTConfig,
    adapt_prefix: Optional[int] = None,
) -> List[TTTResult]:
    """Adapt along a stream without resetting adaptor or optimizer between subjects.

    With ``adapt_prefix = k`` only the first ``k`` subjects are adapted; the rest
    get plain inference with the adaptor as left by subject ``k``.
    """
    if not config.continual:
        raise ConfigurationError("ttt_continual requires config.continual = true")
    if len(subjects) == 0:
        raise ContractError("empty subject stream")
    state = AdaptationState(bundle, config)
    results = []
    for i, subject in enumerate(subjects):
        if adapt_prefix is not None and i >= adapt_prefix:
            with torch.no_grad():
                bundle.eval()
                x = images_tensor(subject.images)
                loss, mask = ttt_loss(bundle, x, config.mode, return_mask=True)
            m = masks_numpy(mask)
            results.append(TTTResult(subject.patient_id, m, float(loss), 0, [float(loss)], m))
            continue
        results.append(ttt_adapt(bundle, subject, config, state))
    return results


@dataclass
class ExperimentResult:
    results: List[TTTResult]
    records: List[MetricRecord] = field(default_factory=list)
    summary: Optional[Summary] = None

    def subject_rows(self) -> List[dict]:
        by_id = {}
        for r in self.records:
            by_id.setdefault(r.patient_id, {})[r.phase] = r
        rows = []
        for res in self.results:
            row = res.record()
            phases = by_id.get(res.patient_id, {})
            if "before" in phases and "after" in phases:
                for m in ("dice", "iou", "hausdorff"):
                    b = getattr(phases["before"], f"mean_{m}")
                    a = getattr(phases["after"], f"mean_{m}")
                    row[f"{m}_before"], row[f"{m}_after"], row[f"{m}_delta"] = b, a, a - b
            rows.append(row)
        return rows


def evaluate_ttt_experiment(
    bundle: ModelBundle,
    test_set: Sequence[PatientVolume],
    config: TTTConfig,
    n_boot: int = 10000,
    seed: int = 0,
) -> ExperimentResult:
    """Adapt every test subject, then score initial and best masks against ground truth.

    Ground truth is stripped before adaptation, so it cannot leak into the loss.
    """
    blind = [s.without_masks() for s in test_set]
    if config.continual:
        results = ttt_continual(bundle, blind, config)
    else:
        results = [ttt_adapt(bundle, s, config) for s in blind]
    records = []
    for subject, res in zip(test_set, results):
        if subject.masks is None:
            log.warning("%s has no ground truth; skipping evaluation", subject.patient_id)
            continue
        records.append(evaluate_volume(res.initial_mask, subject.masks, subject.patient_id, "before"))
        records.append(evaluate_volume(res.best_mask, subject.masks, subject.patient_id, "after"))
    summary = aggregate(records, n_boot=n_boot, seed=seed) if records else None
    return ExperimentResult(results, records, summary)
