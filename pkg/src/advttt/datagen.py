"""Synthetic cardiac-like data, preprocessing, mask corruption and augmentation.

Images are float32 arrays shaped ``(h, w)`` (or stacked ``(n, h, w)``); masks
are one-hot float32 arrays shaped ``(h, w, c)`` with channel 0 the background.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigurationError, ContractError, DegenerateVolumeError, MissingArtifactError

# Cardiac-style preprocessing recipe (ACDC-like).
CARDIAC_SPACING = 1.51
CARDIAC_SIZE = 224

# label order of the rendered structures
STRUCTURES = ("ventricle", "myocardium", "second_blob")
MAX_CLASSES = len(STRUCTURES) + 1


@dataclass
class PatientVolume:
    patient_id: str
    images: np.ndarray  # (n, h, w) float32
    masks: Optional[np.ndarray] = None  # (n, h, w, c) one-hot float32
    spacing: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3:
            raise ContractError(f"images must be (n, h, w), got {self.images.shape}")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.float32)
            if self.masks.shape[:3] != self.images.shape:
                raise ContractError(
                    f"mask shape {self.masks.shape} does not match images {self.images.shape}"
                )

    @property
    def n_slices(self) -> int:
        return self.images.shape[0]

    @property
    def n_classes(self) -> Optional[int]:
        return None if self.masks is None else self.masks.shape[-1]

    def without_masks(self) -> "PatientVolume":
        return replace(self, masks=None)


@dataclass(frozen=True)
class ShiftParams:
    gamma: float = 1.0
    bias_field_amplitude: float = 0.0
    noise_std: float = 0.0
    contrast_scale: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be > 0, got {self.gamma}")
        if not self.contrast_scale > 0:
            raise ConfigurationError(f"contrast_scale must be > 0, got {self.contrast_scale}")
        if self.bias_field_amplitude < 0 or self.noise_std < 0:
            raise ConfigurationError("bias_field_amplitude and noise_std must be >= 0")

    @property
    def is_identity(self) -> bool:
        return (
            self.gamma == 1.0
            and self.bias_field_amplitude == 0.0
            and self.noise_std == 0.0
            and self.contrast_scale == 1.0
        )


@dataclass
class DataSplit:
    """Training pools as used by the semi-supervised objective."""

    labelled: List[PatientVolume]
    unlabelled: List[PatientVolume]  # images only
    unpaired_masks: np.ndarray  # (m, h, w, c), masks of the unlabelled patients

    @property
    def patient_ids(self) -> List[str]:
        return [v.patient_id for v in self.labelled + self.unlabelled]


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return np.eye(n_classes, dtype=np.float32)[labels]


def to_labels(mask: np.ndarray) -> np.ndarray:
    return np.argmax(mask, axis=-1).astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def _smooth_field(rng: np.random.Generator, shape, grid: int = 4) -> np.ndarray:
    """Low-frequency random field with max |value| = 1."""
    coarse = rng.normal(size=(grid, grid))
    zoom = (shape[0] / grid, shape[1] / grid)
    f = ndimage.zoom(coarse, zoom, order=3, mode="nearest")[: shape[0], : shape[1]]
    f = f - f.mean()
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def _ellipse_radius(yy, xx, cy, cx, a, b, theta):
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def _render_patient(rng: np.random.Generator, n_slices: int, size: int, n_classes: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c0 = size / 2.0
    cy = c0 + rng.uniform(-0.08, 0.08) * size
    cx = c0 + rng.uniform(-0.08, 0.08) * size
    r0 = rng.uniform(0.11, 0.15) * size
    th0 = rng.uniform(0.05, 0.07) * size
    ecc = rng.uniform(0.85, 1.15)
    theta = rng.uniform(0, math.pi)
    blob_angle = rng.uniform(0, 2 * math.pi)
    blob_r = rng.uniform(0.09, 0.12) * size

    # per-patient tissue appearance
    lv_int = 0.95 + rng.uniform(-0.05, 0.05)
    myo_int = 0.25 + rng.uniform(-0.05, 0.05)
    blob_int = 0.80 + rng.uniform(-0.05, 0.05)
    bg_int = 0.45 + rng.uniform(-0.05, 0.05)
    distractor_int = 0.68 + rng.uniform(-0.04, 0.04)
    n_distractors = int(rng.integers(2, 5))
    distractors = [
        (rng.uniform(0.1, 0.9) * size, rng.uniform(0.1, 0.9) * size, rng.uniform(0.05, 0.09) * size)
        for _ in range(n_distractors)
    ]
    texture = _smooth_field(rng, (size, size), grid=8)
    gain = rng.uniform(80.0, 400.0)
    offset = rng.uniform(0.0, 50.0)

    images = np.zeros((n_slices, size, size), dtype=np.float32)
    labels = np.zeros((n_slices, size, size), dtype=np.uint8)
    for k in range(n_slices):
        t = k / max(n_slices - 1, 1)  # base -> apex
        r = r0 * (1.0 - 0.45 * t)
        th = th0 * (1.0 - 0.2 * t)
        sy = cy + rng.normal(0, 0.3)
        sx = cx + rng.normal(0, 0.3)
        lv = _ellipse_radius(yy, xx, sy, sx, r * ecc, r / ecc, theta) <= 1.0
        myo = (_ellipse_radius(yy, xx, sy, sx, (r + th) * ecc, (r + th) / ecc, theta) <= 1.0) & ~lv
        dist = r + th + 0.55 * blob_r
        by = sy + dist * math.sin(blob_angle)
        bx = sx + dist * math.cos(blob_angle)
        br = blob_r * (1.0 - 0.5 * t)
        blob = (_ellipse_radius(yy, xx, by, bx, br * 1.4, br * 0.8, blob_angle + math.pi / 2) <= 1.0)
        blob &= ~(lv | myo)
        if t > 0.8:
            blob[:] = False

        img = bg_int + 0.08 * texture
        for dy, dx, dr in distractors:
            d = np.hypot(yy - dy, xx - dx) <= dr
            d &= ~(lv | myo | blob)
            img = np.where(d, distractor_int, img)
        img = np.where(blob, blob_int, img)
        img = np.where(myo, myo_int, img)
        img = np.where(lv, lv_int, img)
        img = ndimage.gaussian_filter(img, 0.6)
        img = img + rng.normal(0, 0.03, size=img.shape)
        images[k] = (gain * img + offset).astype(np.float32)

        lab = np.zeros((size, size), dtype=np.uint8)
        for cls, region in enumerate((lv, myo, blob), start=1):
            if cls < n_classes:
                lab[region] = cls
        labels[k] = lab
    return images, labels


def generate_synthetic_dataset(
    n_patients: int,
    slices_per_patient: int,
    image_size: int,
    n_classes: int,
    seed: int,
    spacing_range: Tuple[float, float] = (1.4, 1.62),
) -> List[PatientVolume]:
    """Render raw (unnormalised) patient volumes with nested cardiac-like shapes.

    Each patient gets a random pose, size, tissue contrast, scanner gain and pixel
    spacing. Masks are rendered from the same geometry as the images.
    """
    if n_classes < 2 or n_classes > MAX_CLASSES:
        raise ConfigurationError(f"n_classes must be in [2, {MAX_CLASSES}], got {n_classes}")
    if image_size < 32:
        raise ConfigurationError(f"image_size must be >= 32, got {image_size}")
    if n_patients < 1 or slices_per_patient < 1:
        raise ConfigurationError("n_patients and slices_per_patient must be positive")

    children = np.random.SeedSequence(seed).spawn(n_patients)
    volumes = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        images, labels = _render_patient(rng, slices_per_patient, image_size, n_classes)
        sp = float(rng.uniform(*spacing_range))
        volumes.append(
            PatientVolume(
                patient_id=f"patient{i:03d}",
                images=images,
                masks=one_hot(labels, n_classes),
                spacing=(sp, sp),
            )
        )
    return volumes


# ---------------------------------------------------------------------------
# preprocessing and shift
# ---------------------------------------------------------------------------


def _crop_or_pad(arr: np.ndarray, size: int, fill) -> np.ndarray:
    """Centre crop / pad the two axes after the first one to ``size``."""
    out = arr
    for axis in (1, 2):
        n = out.shape[axis]
        if n > size:
            start = (n - size) // 2
            out = np.take(out, np.arange(start, start + size), axis=axis)
        elif n < size:
            before = (size - n) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (before, size - n - before)
            if out.ndim == 4:
                padded = np.pad(out, pad, mode="constant", constant_values=0)
                # padded pixels are background
                bg = np.zeros(out.shape[:1] + padded.shape[1:3], dtype=bool)
                idx = [slice(None)] * 3
                idx[axis] = slice(0, before)
                bg[tuple(idx)] = True
                idx[axis] = slice(before + n, None)
                bg[tuple(idx)] = True
                padded[..., 0][bg] = 1.0
                out = padded
            else:
                out = np.pad(out, pad, mode="constant", constant_values=fill)
    return out


def normalise_intensities(images: np.ndarray) -> np.ndarray:
    """(x - median) / IQR with statistics over the whole array."""
    q25, med, q75 = np.percentile(images.astype(np.float64), [25, 50, 75])
    iqr = q75 - q25
    if not iqr > 0:
        raise DegenerateVolumeError("interquartile range is zero; cannot normalise volume")
    return ((images - med) / iqr).astype(np.float32)


def preprocess_volume(volume: PatientVolume, target_spacing: float, target_size: int) -> PatientVolume:
    """Resample to ``target_spacing``, crop/pad to ``target_size`` and normalise per patient."""
    if target_spacing <= 0 or target_size < 1:
        raise ConfigurationError("target_spacing and target_size must be positive")
    sy, sx = volume.spacing
    zoom = (sy / target_spacing, sx / target_spacing)
    images = volume.images
    masks = volume.masks
    if not np.allclose(zoom, 1.0):
        images = ndimage.zoom(images, (1.0,) + zoom, order=1)
        if masks is not None:
            labels = ndimage.zoom(to_labels(masks), (1.0,) + zoom, order=0)
            masks = one_hot(labels, volume.n_classes)
    images = _crop_or_pad(images, target_size, fill=0.0)
    if masks is not None:
        masks = _crop_or_pad(masks, target_size, fill=None)
    return PatientVolume(
        patient_id=volume.patient_id,
        images=normalise_intensities(images),
        masks=masks,
        spacing=(target_spacing, target_spacing),
    )


def apply_domain_shift(image: np.ndarray, params: ShiftParams, seed: int) -> np.ndarray:
    """Intensity shift: signed gamma, smooth multiplicative bias, contrast, noise.

    The gamma curve is ``sign(x) * |x| ** gamma`` so non-negative constants map
    to ``v ** gamma``. A stacked ``(n, h, w)`` input shares one bias field.
    """
    x = np.asarray(image, dtype=np.float64)
    if params.is_identity:
        return x.astype(np.float32)
    rng = np.random.default_rng(seed)
    if params.gamma != 1.0:
        x = np.sign(x) * np.abs(x) ** params.gamma
    if params.bias_field_amplitude > 0:
        field_ = _smooth_field(rng, x.shape[-2:], grid=3)
        x = x * (1.0 + params.bias_field_amplitude * field_)
    x = x * params.contrast_scale
    if params.noise_std > 0:
        x = x + rng.normal(0.0, params.noise_std, size=x.shape)
    return x.astype(np.float32)


# ---------------------------------------------------------------------------
# fake anchors and discriminator augmentation
# ---------------------------------------------------------------------------


def corrupt_mask(
    mask: np.ndarray,
    patch_frac: float = 0.1,
    flip_prob: float = 0.05,
    n_swaps: int = 2,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Swap pairs of square patches, then reassign pixels to random classes."""
    mask = np.asarray(mask, dtype=np.float32)
    if mask.ndim != 3:
        raise ContractError(f"mask must be (h, w, c), got {mask.shape}")
    if not 0 < patch_frac < 1:
        raise ConfigurationError(f"patch_frac must be in (0, 1), got {patch_frac}")
    h, w, c = mask.shape
    side = int(round(patch_frac * min(h, w)))
    side = max(side, 1)
    if n_swaps > 0 and 2 * side > h and 2 * side > w:
        raise ConfigurationError(f"patch of side {side} cannot form non-overlapping pairs in {h}x{w}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    labels = to_labels(mask)
    for _ in range(n_swaps):
        while True:
            y1, y2 = rng.integers(0, h - side + 1, size=2)
            x1, x2 = rng.integers(0, w - side + 1, size=2)
            if abs(int(y1) - int(y2)) >= side or abs(int(x1) - int(x2)) >= side:
                break
        a = labels[y1 : y1 + side, x1 : x1 + side].copy()
        labels[y1 : y1 + side, x1 : x1 + side] = labels[y2 : y2 + side, x2 : x2 + side]
        labels[y2 : y2 + side, x2 : x2 + side] = a
    if flip_prob > 0:
        flip = rng.random((h, w)) < flip_prob
        labels[flip] = rng.integers(0, c, size=int(flip.sum()))
    return one_hot(labels, c)


def augment_batch(
    masks: torch.Tensor,
    noise_std: float = 0.1,
    max_rot: float = math.pi / 2,
    max_shift_frac: float = 0.1,
    generator: Optional[torch.Generator] = None,
    clip: bool = False,
) -> torch.Tensor:
    """Random roto-translation plus instance noise on an ``(N, C, H, W)`` batch.

    Differentiable w.r.t. ``masks``. Border padding keeps the background channel
    filled outside the field of view. The result is not renormalised onto the
    simplex. Noise is left unclipped by default: clipping to [0, 1] raises the
    mean of every zero-valued pixel, so noise-free inputs seen later (test-time
    training) would sit off the training distribution.
    """
    n = masks.shape[0]
    out = masks
    if max_rot > 0 or max_shift_frac > 0:
        opts = dict(dtype=masks.dtype, device=masks.device)
        angle = torch.rand(n, generator=generator).to(**opts) * max_rot
        # affine_grid works in [-1, 1] units: a shift of f * size pixels is 2 * f
        shift = (torch.rand(n, 2, generator=generator).to(**opts) * 2 - 1) * max_shift_frac * 2
        cos, sin = torch.cos(angle), torch.sin(angle)
        theta = torch.stack(
            [torch.stack([cos, -sin, shift[:, 0]], 1), torch.stack([sin, cos, shift[:, 1]], 1)], 1
        )
        grid = F.affine_grid(theta, list(masks.shape), align_corners=False)
        out = F.grid_sample(out, grid, mode="bilinear", padding_mode="border", align_corners=False)
    if noise_std > 0:
        noise = torch.randn(out.shape, generator=generator).to(dtype=out.dtype, device=out.device)
        out = out + noise_std * noise
    return out.clamp(0.0, 1.0) if clip else out


def augment_discriminator_input(
    mask: np.ndarray,
    noise_std: float = 0.1,
    max_rot: float = math.pi / 2,
    max_shift_frac: float = 0.1,
    seed: int = 0,
    clip: bool = False,
) -> np.ndarray:
    """Single-mask ``(h, w, c)`` front end of :func:`augment_batch`."""
    mask = np.asarray(mask, dtype=np.float32)
    if noise_std == 0 and max_rot == 0 and max_shift_frac == 0:
        return mask.copy()
    g = torch.Generator().manual_seed(seed)
    t = torch.from_numpy(mask).permute(2, 0, 1)[None]
    out = augment_batch(t, noise_std, max_rot, max_shift_frac, generator=g, clip=clip)
    return out[0].permute(1, 2, 0).numpy()


# ---------------------------------------------------------------------------
# splits and disk format
# ---------------------------------------------------------------------------


def split_patients(
    dataset: Sequence[PatientVolume],
    fractions: Tuple[float, float, float] = (0.4, 0.2, 0.4),
    labelled_frac: float = 0.25,
    seed: int = 0,
) -> Tuple[DataSplit, List[PatientVolume], List[PatientVolume]]:
    """Patient-level train/val/test split with a partially labelled training set."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigurationError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    if not 0 < labelled_frac <= 1:
        raise ConfigurationError(f"labelled_frac must be in (0, 1], got {labelled_frac}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    train = [dataset[i] for i in order[:n_train]]
    val = [dataset[i] for i in order[n_train : n_train + n_val]]
    test = [dataset[i] for i in order[n_train + n_val :]]
    if not train:
        raise ConfigurationError("training split is empty")
    n_lab = int(math.ceil(labelled_frac * len(train) - 1e-9))
    labelled, rest = train[:n_lab], train[n_lab:]
    held = [v.masks for v in rest if v.masks is not None]
    if held:
        unpaired = np.concatenate(held, axis=0)
    else:
        unpaired = np.concatenate([v.masks for v in labelled], axis=0)
    return DataSplit(labelled, [v.without_masks() for v in rest], unpaired), val, test


def _write_json_atomic(path: Path, payload) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)


def save_volume(volume: PatientVolume, directory) -> None:
    """One directory per patient; ``slice_XXX.f32`` + JSON sidecar + ``slice_XXX_mask.u8``."""
    d = Path(directory) / volume.patient_id
    d.mkdir(parents=True, exist_ok=True)
    n, h, w = volume.images.shape
    for k in range(n):
        stem = f"slice_{k:03d}"
        volume.images[k].astype("<f4").tofile(d / f"{stem}.f32")
        meta = {
            "height": h,
            "width": w,
            "classes": volume.n_classes,
            "spacing": list(volume.spacing),
            "patient_id": volume.patient_id,
            "slice": k,
        }
        (d / f"{stem}.json").write_text(json.dumps(meta, sort_keys=True))
        if volume.masks is not None:
            to_labels(volume.masks[k]).tofile(d / f"{stem}_mask.u8")


def load_volume(directory) -> PatientVolume:
    d = Path(directory)
    metas = sorted(d.glob("slice_*.json"))
    if not metas:
        raise ContractError(f"no slices found in {d}")
    images, labels = [], []
    meta = None
    for m in metas:
        meta = json.loads(m.read_text())
        h, w = meta["height"], meta["width"]
        stem = m.with_suffix("")
        images.append(np.fromfile(f"{stem}.f32", dtype="<f4").reshape(h, w))
        mask_path = Path(f"{stem}_mask.u8")
        if mask_path.exists():
            labels.append(np.fromfile(mask_path, dtype=np.uint8).reshape(h, w))
    masks = None
    if labels:
        if len(labels) != len(images):
            raise ContractError(f"{d}: some slices lack masks")
        masks = one_hot(np.stack(labels), meta["classes"])
    return PatientVolume(meta["patient_id"], np.stack(images), masks, tuple(meta["spacing"]))


@dataclass
class DatasetIndex:
    """Contents of ``dataset.json`` at the dataset root."""

    n_classes: int
    image_size: int
    train: List[str]
    val: List[str]
    test: List[str]
    labelled: List[str]
    shift: Optional[dict] = None
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "image_size": self.image_size,
            "splits": {"train": self.train, "val": self.val, "test": self.test},
            "labelled": self.labelled,
            "shift": self.shift,
            "seed": self.seed,
            **self.extra,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetIndex":
        known = {"n_classes", "image_size", "splits", "labelled", "shift", "seed"}
        return cls(
            n_classes=d["n_classes"],
            image_size=d["image_size"],
            train=d["splits"]["train"],
            val=d["splits"]["val"],
            test=d["splits"]["test"],
            labelled=d["labelled"],
            shift=d.get("shift"),
            seed=d.get("seed", 0),
            extra={k: v for k, v in d.items() if k not in known},
        )


def write_dataset(root, train: DataSplit, val, test, index: DatasetIndex, unlabelled_masks=None) -> None:
    """Write all patients plus ``dataset.json``.

    Unlabelled training patients are written with their masks (``unlabelled_masks``
    maps patient id to masks) because those masks feed the unpaired-mask pool.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    unlabelled_masks = unlabelled_masks or {}
    for v in train.labelled + val + test:
        save_volume(v, root)
    for v in train.unlabelled:
        save_volume(replace(v, masks=unlabelled_masks.get(v.patient_id)), root)
    _write_json_atomic(root / "dataset.json", index.to_json())


def read_dataset(root):
    """Inverse of :func:`write_dataset`; returns ``(DataSplit, val, test, DatasetIndex)``."""
    root = Path(root)
    path = root / "dataset.json"
    if not path.exists():
        raise MissingArtifactError(f"no dataset.json under {root}", code="MISSING_DATASET")
    index = DatasetIndex.from_json(json.loads(path.read_text()))
    load = lambda pid: load_volume(root / pid)  # noqa: E731
    labelled_ids = set(index.labelled)
    labelled, unlabelled, held = [], [], []
    for pid in index.train:
        v = load(pid)
        if pid in labelled_ids:
            labelled.append(v)
        else:
            if v.masks is not None:
                held.append(v.masks)
            unlabelled.append(v.without_masks())
    if held:
        unpaired = np.concatenate(held, axis=0)
    else:
        unpaired = np.concatenate([v.masks for v in labelled], axis=0)
    split = DataSplit(labelled, unlabelled, unpaired)
    return split, [load(p) for p in index.val], [load(p) for p in index.test], index
