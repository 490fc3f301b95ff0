"""Dice, IoU and Hausdorff on hard masks, aggregation and the bootstrapped t-test."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError


def harden(mask: np.ndarray) -> np.ndarray:
    """Argmax a (soft) ``(..., h, w, c)`` mask into a boolean one-hot array."""
    mask = np.asarray(mask)
    c = mask.shape[-1]
    return np.eye(c, dtype=bool)[np.argmax(mask, axis=-1)]


def _check(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ContractError(f"expected (h, w, c) masks, got {a.shape}")
    return harden(a), harden(b)


def dice(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-class Dice; a class absent from both masks scores 1."""
    a, b = _check(a, b)
    inter = (a & b).sum(axis=(0, 1)).astype(np.float64)
    total = a.sum(axis=(0, 1)) + b.sum(axis=(0, 1))
    return np.where(total > 0, 2 * inter / np.maximum(total, 1), 1.0)


def iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = _check(a, b)
    inter = (a & b).sum(axis=(0, 1)).astype(np.float64)
    union = (a | b).sum(axis=(0, 1))
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def _directed(src: np.ndarray, dst: np.ndarray) -> float:
    # distance from every pixel to the nearest pixel of dst
    dist = ndimage.distance_transform_edt(~dst)
    return float(dist[src].max())


def hausdorff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-class symmetric Hausdorff distance in pixels.

    Exactly one empty mask scores ``max(h, w)``; two empty masks score 0.
    """
    a, b = _check(a, b)
    h, w, c = a.shape
    out = np.zeros(c)
    for k in range(c):
        ak, bk = a[..., k], b[..., k]
        ea, eb = not ak.any(), not bk.any()
        if ea and eb:
            out[k] = 0.0
        elif ea or eb:
            out[k] = float(max(h, w))
        else:
            out[k] = max(_directed(ak, bk), _directed(bk, ak))
    return out


@dataclass
class MetricRecord:
    patient_id: str
    phase: str
    dice: np.ndarray  # per class, background included at index 0
    iou: np.ndarray
    hausdorff: np.ndarray

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice[1:]))

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou[1:]))

    @property
    def mean_hausdorff(self) -> float:
        return float(np.mean(self.hausdorff[1:]))

    def rows(self) -> List[dict]:
        return [
            {
                "patient_id": self.patient_id,
                "phase": self.phase,
                "class": k,
                "dice": float(self.dice[k]),
                "iou": float(self.iou[k]),
                "hausdorff": float(self.hausdorff[k]),
            }
            for k in range(len(self.dice))
        ]


def evaluate_volume(pred: np.ndarray, target: np.ndarray, patient_id: str, phase: str) -> MetricRecord:
    """Slice-wise metrics averaged over the slices of one patient."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 4:
        raise ContractError(f"expected matching (n, h, w, c) arrays, got {pred.shape} and {target.shape}")
    d = np.mean([dice(p, t) for p, t in zip(pred, target)], axis=0)
    j = np.mean([iou(p, t) for p, t in zip(pred, target)], axis=0)
    hd = np.mean([hausdorff(p, t) for p, t in zip(pred, target)], axis=0)
    return MetricRecord(patient_id, phase, d, j, hd)


def _t_stat(d: np.ndarray) -> np.ndarray:
    """Paired t statistic along the last axis; 0/0 is mapped to 0."""
    n = d.shape[-1]
    mean = d.mean(axis=-1)
    sd = d.std(axis=-1, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = mean / (sd / np.sqrt(n))
        degenerate = np.where(mean == 0, 0.0, np.sign(mean) * np.inf)
    return np.where(sd > 0, t, degenerate)


def bootstrap_ttest(before: Sequence[float], after: Sequence[float], n_boot: int = 10000, seed: int = 0) -> float:
    """Two-sided p-value of the paired t statistic against its bootstrap null.

    The null distribution resamples the mean-centred paired differences.
    """
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.shape != after.shape or before.ndim != 1:
        raise ContractError("before/after must be 1-D sequences of equal length")
    if len(before) < 5:
        raise ContractError("bootstrap t-test needs at least 5 paired samples")
    d = after - before
    t_obs = _t_stat(d)
    centred = d - d.mean()
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(d), size=(n_boot, len(d)))
    t_null = _t_stat(centred[idx])
    return float(np.mean(np.abs(t_null) >= np.abs(t_obs) - 1e-12))


METRIC_NAMES = ("dice", "iou", "hausdorff")


@dataclass
class Summary:
    stats: Dict[str, Dict[str, Dict[str, float]]] = field(default_factory=dict)  # phase -> metric -> {mean, std}
    deltas: Dict[str, float] = field(default_factory=dict)  # metric -> after - before
    p_values: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"stats": self.stats, "deltas": self.deltas, "p_values": self.p_values}


def aggregate(records: Sequence[MetricRecord], n_boot: int = 10000, seed: int = 0) -> Summary:
    """Mean and population std of foreground-mean metrics per phase, plus deltas.

    Paired p-values are added when both phases cover the same >= 5 patients.
    """
    if not records:
        raise ContractError("no records to aggregate")
    values: Dict[str, Dict[str, Dict[str, float]]] = {}
    for r in records:
        for m in METRIC_NAMES:
            values.setdefault(r.phase, {}).setdefault(m, {})[r.patient_id] = getattr(r, f"mean_{m}")
    summary = Summary()
    for phase in sorted(values):
        summary.stats[phase] = {}
        for m in METRIC_NAMES:
            # sort so the result does not depend on record order
            v = np.array([values[phase][m][k] for k in sorted(values[phase][m])])
            summary.stats[phase][m] = {"mean": float(v.mean()), "std": float(v.std())}
    if "before" in values and "after" in values:
        for m in METRIC_NAMES:
            summary.deltas[m] = summary.stats["after"][m]["mean"] - summary.stats["before"][m]["mean"]
            common = sorted(set(values["before"][m]) & set(values["after"][m]))
            if len(common) >= 5:
                b = [values["before"][m][k] for k in common]
                a = [values["after"][m][k] for k in common]
                summary.p_values[m] = bootstrap_ttest(b, a, n_boot=n_boot, seed=seed)
    return summary
