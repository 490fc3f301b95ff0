"""Flattened experiment configuration and its plain-text file format.

File format, one setting per line::

    # comment
    include = base.conf          # path relative to this file
    train.learning_rate = 2e-3
    model.disc_widths = 8, 16, 32, 64, 128

Lines are applied top to bottom, so a setting after an ``include`` overrides the
included value. Unknown keys are rejected. Precedence when building a config is
CLI flag > config file > defaults (see :func:`build_config`).

All randomness derives from ``run.seed``; see :func:`derive_seed`.
"""

from __future__ import annotations

import hashlib
import math
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from .datagen import ShiftParams
from .errors import ConfigurationError
from .nets import PAPER_DISC_WIDTHS, ModelConfig
from .train import TrainConfig
from .ttt import TTTConfig


@dataclass
class RunSection:
    run_dir: str = "runs/default"
    dataset: str = ""  # empty -> <run_dir>/dataset
    seed: int = 0
    jobs: int = 1
    force: bool = False
    model: str = "gan"
    n_boot: int = 10000


@dataclass
class DataSection:
    n_patients: int = 40
    slices: int = 8
    image_size: int = 32
    n_classes: int = 4
    target_spacing: float = 1.51
    spacing_min: float = 1.4
    spacing_max: float = 1.62
    fractions: Tuple[float, ...] = (0.4, 0.2, 0.4)
    labelled_frac: float = 0.25


@dataclass
class ShiftSection:
    gamma: float = 1.0
    bias_field_amplitude: float = 0.0
    noise_std: float = 0.0
    contrast_scale: float = 1.0


@dataclass
class ModelSection:
    unet_depth: int = 3
    unet_base: int = 16
    adaptor_channels: int = 16
    disc_widths: Tuple[int, ...] = PAPER_DISC_WIDTHS
    residual_channels: int = 8
    residual_downsample: int = 4


@dataclass
class TrainSection:
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
    use_adaptor: bool = True
    use_smoothness: bool = True
    use_fake_anchors: bool = True
    use_patch_swap: bool = True
    use_binary_noise: bool = True
    use_adversarial: bool = True


@dataclass
class TTTSection:
    patience: int = 200
    max_iter: int = 1000
    mode: str = "adversarial"
    unit: str = "patient"
    learning_rate: float = 1e-4
    min_delta: float = 0.0
    carry: str = "best"


@dataclass
class EvalSection:
    source: str = "ttt"  # ttt | continual | model


@dataclass
class AblateSection:
    table: str = "all"  # components | anchors | all


@dataclass
class DiagnoseSection:
    history: str = ""  # empty -> <run_dir>/history.csv
    window: int = 10
    tol: float = 0.15
    probe: bool = False  # score clean vs corrupted validation masks with the checkpoint


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "shift": ShiftSection,
    "model": ModelSection,
    "train": TrainSection,
    "ttt": TTTSection,
    "eval": EvalSection,
    "ablate": AblateSection,
    "diagnose": DiagnoseSection,
}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    shift: ShiftSection = field(default_factory=ShiftSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    ttt: TTTSection = field(default_factory=TTTSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)

    # -- flat view ---------------------------------------------------------

    def flat(self) -> Dict[str, object]:
        out = {}
        for name in SECTIONS:
            for k, v in asdict(getattr(self, name)).items():
                out[f"{name}.{k}"] = v
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.flat().items())

    def with_overrides(self, overrides: Dict[str, str]) -> "ExperimentConfig":
        """Return a copy with ``{"section.key": "text value"}`` applied."""
        sections = {name: asdict(getattr(self, name)) for name in SECTIONS}
        for key, text in overrides.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or name not in sections[section]:
                raise ConfigurationError(f"unknown config key {key!r}")
            ftype = _field_types(SECTIONS[section])[name]
            sections[section][name] = parse_value(text, ftype, key)
        return ExperimentConfig(**{n: SECTIONS[n](**d) for n, d in sections.items()})

    # -- derived paths and module configs -----------------------------------

    @property
    def run_dir(self) -> Path:
        return Path(self.run.run_dir)

    @property
    def dataset_dir(self) -> Path:
        return Path(self.run.dataset) if self.run.dataset else self.run_dir / "dataset"

    @property
    def shift_params(self) -> ShiftParams:
        return ShiftParams(**asdict(self.shift))

    def seed_for(self, name: str) -> int:
        return derive_seed(self.run.seed, name)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.data.image_size,
            n_classes=self.data.n_classes,
            use_adaptor=self.train.use_adaptor,
            smooth=self.train.use_smoothness,
            model=self.run.model,
            **asdict(self.model),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed_for("train"), **asdict(self.train))

    def ttt_config(self, continual: bool = False) -> TTTConfig:
        return TTTConfig(continual=continual, seed=self.seed_for("ttt"), **asdict(self.ttt))

    def validate(self) -> "ExperimentConfig":
        """Build every module config once so errors surface before any work starts."""
        if self.run.jobs < 1:
            raise ConfigurationError("run.jobs must be >= 1")
        if self.eval.source not in ("ttt", "continual", "model"):
            raise ConfigurationError(f"eval.source must be ttt, continual or model, got {self.eval.source!r}")
        if self.ablate.table not in ("components", "anchors", "all"):
            raise ConfigurationError(f"ablate.table must be components, anchors or all, got {self.ablate.table!r}")
        if len(self.data.fractions) != 3:
            raise ConfigurationError("data.fractions needs three values")
        self.model_config()
        self.train_config()
        self.ttt_config()
        self.shift_params
        return self


def derive_seed(root: int, name: str) -> int:
    """First four bytes (little-endian) of sha256("<root>/<name>")."""
    digest = hashlib.sha256(f"{int(root)}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# ---------------------------------------------------------------------------
# values
# ---------------------------------------------------------------------------


def _field_types(cls) -> Dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def parse_value(text: str, ftype, key: str = "?"):
    text = str(text).strip()
    try:
        if ftype is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        if ftype is str:
            return text
        if typing.get_origin(ftype) is tuple:
            (inner, *_) = typing.get_args(ftype)
            return tuple(parse_value(t, inner, key) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from None
    raise ConfigurationError(f"unsupported type for {key}")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def read_config_file(path, _seen: Optional[set] = None) -> Dict[str, str]:
    """Flatten a config file (following includes) into ordered ``key -> text``."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    seen = set() if _seen is None else _seen
    real = path.resolve()
    if real in seen:
        raise ConfigurationError(f"include cycle at {path}")
    seen = seen | {real}
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = key.strip(), value.strip()
        if key == "include":
            out.update(read_config_file(path.parent / value, seen))
        else:
            out[key] = value
    return out


def parse_shift(text: str) -> Dict[str, str]:
    """``"gamma=1.3,noise_std=0.1"`` -> ``{"shift.gamma": "1.3", ...}``; ``"none"`` resets."""
    text = text.strip()
    if text.lower() in ("", "none"):
        return {f"shift.{k}": format_value(v) for k, v in asdict(ShiftSection()).items()}
    out = {}
    for part in text.split(","):
        k, sep, v = part.partition("=")
        if not sep:
            raise ConfigurationError(f"bad shift term {part!r}; expected name=value")
        out[f"shift.{k.strip()}"] = v.strip()
    return out


def build_config(
    config_file: Optional[str] = None,
    cli_overrides: Optional[Dict[str, str]] = None,
) -> ExperimentConfig:
    """Defaults, then file settings, then CLI overrides."""
    cfg = ExperimentConfig()
    if config_file:
        cfg = cfg.with_overrides(read_config_file(config_file))
    if cli_overrides:
        cfg = cfg.with_overrides(cli_overrides)
    return cfg.validate()


def key_reference() -> List[Tuple[str, str, str]]:
    """``(key, type, default)`` for every accepted key."""
    rows = []
    for name, cls in SECTIONS.items():
        types = _field_types(cls)
        for f in fields(cls):
            default = getattr(cls(), f.name)
            ftype = types[f.name]
            tname = "list" if typing.get_origin(ftype) is tuple else ftype.__name__
            rows.append((f"{name}.{f.name}", tname, format_value(default)))
    return rows


def ablation_variants(cfg: ExperimentConfig, table: str) -> Iterable[Tuple[str, ExperimentConfig, bool, bool]]:
    """``(name, config, with_ttt, is_reference)`` per ablation row."""
    t = cfg.train
    rows = []
    if table in ("components", "all"):
        rows += [
            ("ours", replace(t), True, True),
            ("no_ttt", replace(t), False, False),
            ("no_fake_anchors", replace(t, use_fake_anchors=False), False, False),
            ("no_smoothness", replace(t, use_fake_anchors=False, use_smoothness=False), False, False),
            ("no_adaptor", replace(t, use_fake_anchors=False, use_smoothness=False, use_adaptor=False), False, False),
        ]
    if table in ("anchors", "all"):
        rows += [
            ("anchors_none", replace(t, use_fake_anchors=False), False, False),
            ("anchors_patch_swap", replace(t, use_binary_noise=False), False, False),
            ("anchors_binary_noise", replace(t, use_patch_swap=False), False, False),
            ("anchors_both", replace(t), False, table == "anchors"),
            ("anchors_both_ttt", replace(t), True, False),
        ]
    for name, train, with_ttt, ref in rows:
        yield name, replace(cfg, train=train), with_ttt, ref
