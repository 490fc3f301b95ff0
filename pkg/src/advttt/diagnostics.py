"""Discriminator convergence diagnostics from loss traces."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Dict, Optional

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import ContractError
from .train import TrainHistory, masks_tensor

MODES = ("discriminative", "equilibrium", "memorization", "forgetting-collapse", "undetermined")

# loss levels of the per-label squared errors E[(d - 1)²], E[(d + 1)²]
EQUILIBRIUM_LEVEL = 1.0
MEMORIZATION_LEVEL = 2.0


@dataclass
class ConvergenceReport:
    mode: str
    evidence: Dict[str, float]
    window: int
    tol: float
    score_gap: Optional[float] = None

    def to_json(self) -> dict:
        return asdict(self)


def _near(v: float, target: float, tol: float) -> bool:
    return abs(v - target) <= tol


def classify_convergence(
    history: TrainHistory,
    window: int = 10,
    tol: float = 0.15,
    score_gap: Optional[float] = None,
) -> ConvergenceReport:
    """Label the end state of the discriminator from its last ``window`` epochs.

    ``score_gap`` is mean d(clean) - mean d(corrupted) on a probe set; when given
    and below ``tol`` while the training losses sit at the equilibrium level,
    the verdict is forgetting-collapse rather than equilibrium.
    """
    if window < 1:
        raise ContractError("window must be >= 1")
    epochs = history.epochs
    if len(epochs) < window:
        raise ContractError(f"history has {len(epochs)} epochs, need >= {window}")
    last = set(epochs[-window:])
    evidence = {}
    for split in ("train", "val"):
        for term in ("real", "fake"):
            vals = [v for e, s, n, v in history.records if e in last and s == split and n == f"disc_{term}"]
            evidence[f"{split}_{term}"] = float(np.mean(vals)) if vals else float("nan")
    if not all(np.isfinite([evidence["val_real"], evidence["val_fake"]])):
        raise ContractError("history lacks finite validation discriminator losses")

    vr, vf = evidence["val_real"], evidence["val_fake"]
    tr, tf = evidence["train_real"], evidence["train_fake"]
    train_at_eq = np.isfinite(tr) and np.isfinite(tf) and _near(tr, EQUILIBRIUM_LEVEL, tol) and _near(tf, EQUILIBRIUM_LEVEL, tol)
    if score_gap is not None and train_at_eq and score_gap < tol:
        mode = "forgetting-collapse"
    elif _near(vr, EQUILIBRIUM_LEVEL, tol) and _near(vf, EQUILIBRIUM_LEVEL, tol):
        mode = "equilibrium"
    elif vr >= MEMORIZATION_LEVEL - tol and _near(vf, 0.0, tol):
        # real masks of unseen patients pushed to the fake label
        mode = "memorization"
    elif _near(vr, 0.0, tol) and _near(vf, 0.0, tol):
        mode = "discriminative"
    else:
        mode = "undetermined"
    return ConvergenceReport(mode, evidence, window, tol, score_gap)


def auc(pos_scores, neg_scores) -> float:
    """Probability that a positive outscores a negative (ties count one half)."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise ContractError("non-finite scores")
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = len(pos), len(neg)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


@torch.no_grad()
def discriminator_scores(disc: Callable, masks: np.ndarray, batch_size: int = 64) -> np.ndarray:
    if isinstance(disc, torch.nn.Module):
        disc.eval()
    t = masks_tensor(masks)
    return torch.cat([disc(t[i : i + batch_size]) for i in range(0, len(t), batch_size)]).numpy()


def corrupted_detection_auc(disc, clean_masks: np.ndarray, corrupted_masks: np.ndarray, min_samples: int = 20) -> float:
    """ROC AUC of clean (positive, higher) vs corrupted masks from discriminator scores."""
    if len(clean_masks) < min_samples or len(corrupted_masks) < min_samples:
        raise ContractError(f"need at least {min_samples} masks per class")
    return auc(discriminator_scores(disc, clean_masks), discriminator_scores(disc, corrupted_masks))


def corrupted_score_gap(disc, clean_masks: np.ndarray, corrupted_masks: np.ndarray) -> float:
    return float(discriminator_scores(disc, clean_masks).mean() - discriminator_scores(disc, corrupted_masks).mean())
