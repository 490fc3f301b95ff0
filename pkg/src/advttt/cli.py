"""Command-line entry point: synth, train, ttt, continual, eval, ablate, diagnose.

Every command writes ``<run_dir>/manifests/<command>.json`` at start and at
completion. On failure the process exits nonzero and prints an error JSON
``{"error": {"code": ..., "message": ..., "command": ...}}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig, ablation_variants, build_config, format_value, parse_shift
from .datagen import (
    DataSplit,
    DatasetIndex,
    PatientVolume,
    apply_domain_shift,
    corrupt_mask,
    generate_synthetic_dataset,
    one_hot,
    preprocess_volume,
    read_dataset,
    split_patients,
    to_labels,
    write_dataset,
)
from .diagnostics import classify_convergence, corrupted_detection_auc, corrupted_score_gap
from .errors import AdvTTTError, ArtifactExistsError, ConfigurationError, MissingArtifactError
from .metrics import MetricRecord, aggregate, evaluate_volume
from .nets import ModelBundle, init_models, load_checkpoint, save_checkpoint
from .train import TrainHistory, fit, predict
from .ttt import ExperimentResult, TTTConfig, TTTResult, evaluate_ttt_experiment, ttt_adapt

log = logging.getLogger("advttt")

COMMANDS = ("synth", "train", "ttt", "continual", "eval", "ablate", "diagnose")


def setup_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_json_atomic(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)


@dataclass
class RunManifest:
    command: str
    config: Dict[str, object]
    seeds: Dict[str, int]
    code_version: str = __version__
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    status: str = "running"
    artifacts: Dict[str, str] = field(default_factory=dict)
    error: Optional[dict] = None

    @classmethod
    def start(cls, command: str, cfg: ExperimentConfig) -> "RunManifest":
        seeds = {"root": cfg.run.seed, **{n: cfg.seed_for(n) for n in SEED_NAMES}}
        m = cls(command, {k: format_value(v) for k, v in cfg.flat().items()}, seeds)
        m.write(cfg.run_dir)
        return m

    def path(self, run_dir: Path) -> Path:
        return Path(run_dir) / "manifests" / f"{self.command}.json"

    def write(self, run_dir: Path) -> None:
        write_json_atomic(self.path(run_dir), asdict(self))

    def finish(self, run_dir: Path, status: str = "ok", error: Optional[dict] = None) -> None:
        self.status, self.error, self.finished = status, error, _now()
        self.write(run_dir)


SEED_NAMES = ("data", "split", "shift", "model", "train", "ttt", "bootstrap")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def synthesize(cfg: ExperimentConfig) -> Tuple[DataSplit, List[PatientVolume], List[PatientVolume]]:
    """Generate, preprocess and split the synthetic benchmark; shift the test split."""
    d = cfg.data
    raw = generate_synthetic_dataset(
        d.n_patients, d.slices, d.image_size, d.n_classes, cfg.seed_for("data"), (d.spacing_min, d.spacing_max)
    )
    volumes = [preprocess_volume(v, d.target_spacing, d.image_size) for v in raw]
    split, val, test = split_patients(volumes, tuple(d.fractions), d.labelled_frac, cfg.seed_for("split"))
    shift = cfg.shift_params
    if not shift.is_identity:
        base = cfg.seed_for("shift")
        test = [
            PatientVolume(v.patient_id, apply_domain_shift(v.images, shift, base + i), v.masks, v.spacing)
            for i, v in enumerate(test)
        ]
    return split, val, test


def cmd_synth(cfg: ExperimentConfig) -> Dict[str, str]:
    root = cfg.dataset_dir
    if root.exists() and any(root.iterdir()):
        if not cfg.run.force:
            raise ArtifactExistsError(f"{root} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(root)
    split, val, test = synthesize(cfg)
    # the generator knows the masks of unlabelled patients; keep them for the unpaired pool
    raw_masks = {}
    offset = 0
    for v in split.unlabelled:
        n = v.n_slices
        raw_masks[v.patient_id] = split.unpaired_masks[offset : offset + n]
        offset += n
    index = DatasetIndex(
        n_classes=cfg.data.n_classes,
        image_size=cfg.data.image_size,
        train=split.patient_ids,
        val=[v.patient_id for v in val],
        test=[v.patient_id for v in test],
        labelled=[v.patient_id for v in split.labelled],
        shift=None if cfg.shift_params.is_identity else asdict(cfg.shift),
        seed=cfg.run.seed,
    )
    write_dataset(root, split, val, test, index, unlabelled_masks=raw_masks)
    counts = {"train": len(index.train), "labelled": len(index.labelled), "val": len(index.val), "test": len(index.test)}
    print(json.dumps({"dataset": str(root), **counts}))
    return {"dataset": str(root)}


def load_data(cfg: ExperimentConfig):
    split, val, test, index = read_dataset(cfg.dataset_dir)
    if index.n_classes != cfg.data.n_classes or index.image_size != cfg.data.image_size:
        raise ConfigurationError(
            f"dataset has n_classes={index.n_classes}, image_size={index.image_size}; config disagrees"
        )
    return split, val, test


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def train_bundle(cfg: ExperimentConfig, split: DataSplit, val) -> Tuple[ModelBundle, TrainHistory]:
    bundle = init_models(cfg.model_config(), cfg.seed_for("model"))
    return fit(bundle, split, val, cfg.train_config())


def cmd_train(cfg: ExperimentConfig) -> Dict[str, str]:
    split, val, _ = load_data(cfg)
    bundle, history = train_bundle(cfg, split, val)
    ckpt = cfg.run_dir / "checkpoint"
    best = history.best_epoch
    val_loss = history.series("val", "supervised")[best] if best >= 0 else float("nan")
    save_checkpoint(bundle, ckpt, epoch=best, val_loss=val_loss)
    hist = cfg.run_dir / "history.csv"
    history.to_csv(hist)
    return {"checkpoint": str(ckpt), "history": str(hist)}


def load_bundle(cfg: ExperimentConfig) -> ModelBundle:
    bundle, _ = load_checkpoint(cfg.run_dir / "checkpoint")
    return bundle


# ---------------------------------------------------------------------------
# ttt / continual
# ---------------------------------------------------------------------------

_worker_bundle: Optional[ModelBundle] = None


def _worker_init(ckpt: str) -> None:
    global _worker_bundle
    setup_determinism()
    _worker_bundle, _ = load_checkpoint(ckpt)


def _worker_adapt(args) -> TTTResult:
    subject, config = args
    return ttt_adapt(_worker_bundle, subject, config)


def run_ttt(cfg: ExperimentConfig, bundle: ModelBundle, test, continual: bool) -> ExperimentResult:
    config = cfg.ttt_config(continual=continual)
    if continual or cfg.run.jobs == 1:
        return evaluate_ttt_experiment(bundle, test, config, n_boot=cfg.run.n_boot, seed=cfg.seed_for("bootstrap"))
    blind = [s.without_masks() for s in test]
    with ProcessPoolExecutor(cfg.run.jobs, initializer=_worker_init, initargs=(str(cfg.run_dir / "checkpoint"),)) as ex:
        results = list(ex.map(_worker_adapt, [(s, config) for s in blind]))
    records = []
    for subject, res in zip(test, results):
        records.append(evaluate_volume(res.initial_mask, subject.masks, subject.patient_id, "before"))
        records.append(evaluate_volume(res.best_mask, subject.masks, subject.patient_id, "after"))
    summary = aggregate(records, n_boot=cfg.run.n_boot, seed=cfg.seed_for("bootstrap"))
    return ExperimentResult(results, records, summary)


TTT_COLUMNS = (
    "patient_id", "n_iter", "best_step", "initial_loss", "best_loss", "diverged",
    "dice_before", "dice_after", "dice_delta", "iou_before", "iou_after", "iou_delta",
    "hausdorff_before", "hausdorff_after", "hausdorff_delta",
)  # fmt: skip


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c, "")) for c in columns])


def write_ttt_outputs(out: Path, experiment: ExperimentResult) -> Dict[str, str]:
    rows = experiment.subject_rows()
    for row in rows:
        write_json_atomic(out / "subjects" / f"{row['patient_id']}.json", {k: _json_safe(v) for k, v in row.items()})
    write_csv(out / "results.csv", TTT_COLUMNS, rows)
    preds = {}
    for res in experiment.results:
        preds[f"before/{res.patient_id}"] = to_labels(res.initial_mask)
        preds[f"after/{res.patient_id}"] = to_labels(res.best_mask)
    np.savez_compressed(out / "predictions.npz", **preds)
    if experiment.summary is not None:
        write_json_atomic(out / "summary.json", experiment.summary.to_json())
    return {"results": str(out / "results.csv"), "predictions": str(out / "predictions.npz"), "subjects": str(out / "subjects")}


def _json_safe(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _cmd_adapt(cfg: ExperimentConfig, continual: bool) -> Dict[str, str]:
    bundle = load_bundle(cfg)
    _, _, test = load_data(cfg)
    experiment = run_ttt(cfg, bundle, test, continual)
    out = cfg.run_dir / ("continual" if continual else "ttt")
    artifacts = write_ttt_outputs(out, experiment)
    s = experiment.summary
    print(json.dumps({"dice_before": s.stats["before"]["dice"]["mean"], "dice_after": s.stats["after"]["dice"]["mean"],
                      "p_value": s.p_values.get("dice")}))  # fmt: skip
    return artifacts


def cmd_ttt(cfg: ExperimentConfig) -> Dict[str, str]:
    return _cmd_adapt(cfg, continual=False)


def cmd_continual(cfg: ExperimentConfig) -> Dict[str, str]:
    return _cmd_adapt(cfg, continual=True)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("patient_id", "phase", "class", "dice", "iou", "hausdorff")


def evaluate_predictions(cfg: ExperimentConfig, test) -> List[MetricRecord]:
    records = []
    if cfg.eval.source == "model":
        bundle = load_bundle(cfg)
        for v in test:
            records.append(evaluate_volume(predict(bundle, v.images), v.masks, v.patient_id, "before"))
        return records
    path = cfg.run_dir / cfg.eval.source / "predictions.npz"
    if not path.exists():
        raise MissingArtifactError(f"no predictions at {path}; run `{cfg.eval.source}` first", code="MISSING_PREDICTIONS")
    with np.load(path) as preds:
        c = cfg.data.n_classes
        for v in test:
            for phase in ("before", "after"):
                key = f"{phase}/{v.patient_id}"
                if key not in preds:
                    raise MissingArtifactError(f"{path} lacks {key}", code="MISSING_PREDICTIONS")
                records.append(evaluate_volume(one_hot(preds[key], c), v.masks, v.patient_id, phase))
    return records


def cmd_eval(cfg: ExperimentConfig) -> Dict[str, str]:
    _, _, test = load_data(cfg)
    records = evaluate_predictions(cfg, test)
    out = cfg.run_dir / "eval"
    rows = [row for r in sorted(records, key=lambda r: (r.patient_id, r.phase != "before")) for row in r.rows()]
    write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    summary = aggregate(records, n_boot=cfg.run.n_boot, seed=cfg.seed_for("bootstrap"))
    write_json_atomic(out / "summary.json", summary.to_json())
    print(json.dumps(summary.to_json()))
    return {"metrics": str(out / "metrics.csv"), "summary": str(out / "summary.json")}


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = (
    "name", "adaptor", "smoothness", "fake_anchors", "patch_swap", "binary_noise", "adversarial_ttt",
    "dice_mean", "dice_std", "n_patients", "reference",
)  # fmt: skip


def ablation_table(cfg: ExperimentConfig, split: DataSplit, val, test, table: Optional[str] = None) -> List[dict]:
    """Train each toggle combination once and score the test split with or without TTT."""
    cache: Dict[tuple, ModelBundle] = {}
    rows = []
    for name, variant, with_ttt, reference in ablation_variants(cfg, table or cfg.ablate.table):
        t = variant.train
        key = tuple(sorted(asdict(t).items()))
        if key not in cache:
            log.info("ablation: training %s", name)
            cache[key], _ = train_bundle(variant, split, val)
        bundle = cache[key]
        if with_ttt:
            experiment = run_ttt(variant, bundle, test, continual=False)
            recs = [r for r in experiment.records if r.phase == "after"]
        else:
            recs = [evaluate_volume(predict(bundle, v.images), v.masks, v.patient_id, "before") for v in test]
        scores = np.array([r.mean_dice for r in sorted(recs, key=lambda r: r.patient_id)])
        rows.append(
            {
                "name": name,
                "adaptor": t.use_adaptor,
                "smoothness": t.use_smoothness,
                "fake_anchors": t.use_fake_anchors and (t.use_patch_swap or t.use_binary_noise),
                "patch_swap": t.use_fake_anchors and t.use_patch_swap,
                "binary_noise": t.use_fake_anchors and t.use_binary_noise,
                "adversarial_ttt": with_ttt,
                "dice_mean": float(scores.mean()),
                "dice_std": float(scores.std()),
                "n_patients": len(scores),
                "reference": reference,
            }
        )
    return rows


def cmd_ablate(cfg: ExperimentConfig) -> Dict[str, str]:
    split, val, test = load_data(cfg)
    if not cfg.train.use_adaptor and cfg.ablate.table in ("components", "all"):
        raise ConfigurationError("the reference row needs train.use_adaptor = true")
    rows = ablation_table(cfg, split, val, test)
    path = cfg.run_dir / "ablation.csv"
    write_csv(path, ABLATION_COLUMNS, rows)
    for row in rows:
        print(f"{row['name']:<22} {100 * row['dice_mean']:6.2f} ± {100 * row['dice_std']:5.2f}")
    return {"ablation": str(path)}


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------


def probe_masks(cfg: ExperimentConfig, val) -> Tuple[np.ndarray, np.ndarray]:
    """Clean validation masks and corrupted copies of them."""
    clean = np.concatenate([v.masks for v in val]).astype(np.float32)
    rng = np.random.default_rng(cfg.seed_for("bootstrap"))
    t = cfg.train
    corrupted = np.stack([corrupt_mask(m, t.patch_frac, t.flip_prob, t.n_swaps, rng=rng) for m in clean])
    return clean, corrupted


def cmd_diagnose(cfg: ExperimentConfig) -> Dict[str, str]:
    path = Path(cfg.diagnose.history) if cfg.diagnose.history else cfg.run_dir / "history.csv"
    if not path.exists():
        raise MissingArtifactError(f"no history CSV at {path}", code="MISSING_HISTORY")
    history = TrainHistory.from_csv(path)
    gap = auc_value = None
    if cfg.diagnose.probe:
        bundle = load_bundle(cfg)
        _, val, _ = load_data(cfg)
        clean, corrupted = probe_masks(cfg, val)
        gap = corrupted_score_gap(bundle.discriminator, clean, corrupted)
        auc_value = corrupted_detection_auc(bundle.discriminator, clean, corrupted)
    report = classify_convergence(history, cfg.diagnose.window, cfg.diagnose.tol, score_gap=gap)
    payload = report.to_json()
    if auc_value is not None:
        payload["detection_auc"] = auc_value
    out = cfg.run_dir / "diagnosis.json"
    write_json_atomic(out, payload)
    print(json.dumps(payload, sort_keys=True))
    return {"diagnosis": str(out)}


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "ttt": cmd_ttt,
    "continual": cmd_continual,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
}


# ---------------------------------------------------------------------------
# argv
# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advttt", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="plain-text key = value config file")
    p.add_argument("--run-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--force", action="store_true")
    p.add_argument("--shift", help="e.g. gamma=1.3,noise_std=0.1 (or 'none')")
    p.add_argument("--mode", choices=("adversarial", "reconstruction", "both"))
    p.add_argument("--model", choices=("gan", "causal"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def overrides_from_args(args: argparse.Namespace) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if args.shift is not None:
        out.update(parse_shift(args.shift))
    flags = {
        "run.run_dir": args.run_dir,
        "run.seed": args.seed,
        "run.jobs": args.jobs,
        "ttt.mode": args.mode,
        "run.model": args.model,
    }
    out.update({k: str(v) for k, v in flags.items() if v is not None})
    if args.force:
        out["run.force"] = "true"
    return out


def parse_argv(argv: Sequence[str]) -> Tuple[str, ExperimentConfig]:
    """Pure: the same argv and config file always give the same config."""
    args = make_parser().parse_args(list(argv))
    return args.command, build_config(args.config, overrides_from_args(args))


def run_command(command: str, cfg: ExperimentConfig) -> Dict[str, str]:
    setup_determinism()
    manifest = RunManifest.start(command, cfg)
    try:
        artifacts = HANDLERS[command](cfg)
    except AdvTTTError as err:
        manifest.finish(cfg.run_dir, "failed", {"code": err.code, "message": str(err)})
        raise
    manifest.artifacts = artifacts
    manifest.finish(cfg.run_dir)
    return artifacts


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = argv[0] if argv else "?"
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        command, cfg = parse_argv(argv)
        run_command(command, cfg)
    except AdvTTTError as err:
        print(json.dumps({"error": {"code": err.code, "message": str(err), "command": command}}), file=sys.stderr)
        return 2 if isinstance(err, ConfigurationError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
