"""Adaptor, UNet segmentor, mask discriminator, causal encoder/decoder, checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, MissingArtifactError

PAPER_DISC_WIDTHS = (32, 64, 128, 256, 512)
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# spectral normalisation
# ---------------------------------------------------------------------------


def _l2n(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return v / (v.norm() + eps)


def spectral_normalize(
    weight: torch.Tensor,
    u: Optional[torch.Tensor] = None,
    n_power_iterations: int = 1,
    update: bool = True,
    v: Optional[torch.Tensor] = None,
):
    """Divide ``weight`` by its top singular value estimated by power iteration.

    The weight is viewed as ``(out, -1)``. ``u`` (and optionally ``v``) are the
    persistent singular-vector estimates; when ``update`` is false the stored
    vectors are used as is. Returns ``(normalised_weight, u, v)``. An all-zero
    weight is returned unchanged.
    """
    w2d = weight.reshape(weight.shape[0], -1)
    if u is None:
        u = _l2n(torch.ones(w2d.shape[0], dtype=weight.dtype, device=weight.device))
    with torch.no_grad():
        if not torch.any(w2d != 0):
            return weight, u, v if v is not None else torch.zeros(w2d.shape[1], dtype=weight.dtype)
        if update or v is None:
            for _ in range(max(n_power_iterations, 1)):
                v = _l2n(w2d.t() @ u)
                u = _l2n(w2d @ v)
    sigma = torch.dot(u, w2d @ v)
    return weight / sigma, u.clone(), v.clone()


def top_singular_value(weight: torch.Tensor, n_iter: int = 100) -> float:
    """Plain power-iteration estimate of the largest singular value."""
    w2d = weight.detach().reshape(weight.shape[0], -1).double()
    g = torch.Generator().manual_seed(0)
    v = _l2n(torch.randn(w2d.shape[1], generator=g, dtype=torch.float64))
    for _ in range(n_iter):
        u = _l2n(w2d @ v)
        v = _l2n(w2d.t() @ u)
    return float((w2d @ v).norm())


class SpectralNorm(nn.Module):
    """Wraps a conv/linear layer; its ``weight`` is spectrally normalised on every call.

    One power iteration per training-mode forward, stored vectors in eval mode.
    """

    def __init__(self, layer: nn.Module, n_power_iterations: int = 1, warmup: int = 20):
        super().__init__()
        self.layer = layer
        self.n_power_iterations = n_power_iterations
        w = layer.weight.detach()
        _, u, v = spectral_normalize(w, None, n_power_iterations=warmup)
        self.register_buffer("u", u)
        self.register_buffer("v", v)

    def normalized_weight(self) -> torch.Tensor:
        update = self.training and torch.is_grad_enabled()
        w, u, v = spectral_normalize(
            self.layer.weight, self.u, self.n_power_iterations, update=update, v=self.v
        )
        if update:
            with torch.no_grad():
                self.u.copy_(u)
                self.v.copy_(v)
        return w

    def forward(self, x):
        w = self.normalized_weight()
        if isinstance(self.layer, nn.Conv2d):
            return self.layer._conv_forward(x, w, self.layer.bias)
        return F.linear(x, w, self.layer.bias)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


def gaussian_activation(t: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """f(t) = exp(-t² / s²)."""
    return torch.exp(-(t**2) / (scale**2))


class Adaptor(nn.Module):
    """Shallow residual block: conv-f-conv-f-conv added back onto the input."""

    def __init__(self, channels: int = 16, in_channels: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv3 = nn.Conv2d(channels, in_channels, 3, padding=1)
        # randomly initialised, trained with the block
        self.scales = nn.Parameter(torch.empty(2).uniform_(0.5, 1.5))

    def forward(self, x):
        h = gaussian_activation(self.conv1(x), self.scales[0])
        h = gaussian_activation(self.conv2(h), self.scales[1])
        return x + self.conv3(h)


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, n_classes: int, depth: int = 3, base: int = 16, in_channels: int = 1):
        super().__init__()
        if depth < 1:
            raise ConfigurationError("UNet depth must be >= 1")
        widths = [base * 2**i for i in range(depth)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.down.append(_double_conv(cin, w))
            cin = w
        self.up = nn.ModuleList()
        self.up_conv = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.up_conv.append(_double_conv(2 * w, w))
            cin = w
        self.head = nn.Conv2d(cin, n_classes, 1)
        self.bottleneck_channels = widths[-1]

    def forward(self, x, return_logits: bool = False):
        skips = []
        h = x
        for i, block in enumerate(self.down):
            h = block(h)
            if i < len(self.down) - 1:
                skips.append(h)
                h = F.max_pool2d(h, 2)
        for up, conv in zip(self.up, self.up_conv):
            h = up(h)
            h = conv(torch.cat([h, skips.pop()], dim=1))
        logits = self.head(h)
        return logits if return_logits else torch.softmax(logits, dim=1)


class Discriminator(nn.Module):
    """Five 4x4 convolutions (stride 2, 2, 1, 1, 1) and a linear scalar head.

    ``smooth`` switches on spectral normalisation and tanh; without it the layers
    are plain with leaky-ReLU activations.
    """

    def __init__(self, n_classes: int, image_size: int, widths: Sequence[int] = PAPER_DISC_WIDTHS, smooth: bool = True):
        super().__init__()
        if len(widths) != 5:
            raise ConfigurationError(f"discriminator needs 5 widths, got {tuple(widths)}")
        if image_size % 4:
            raise ConfigurationError("discriminator input size must be divisible by 4")
        self.widths = tuple(int(w) for w in widths)
        self.smooth = smooth
        layers = []
        cin = n_classes
        for i, w in enumerate(self.widths):
            if i < 2:
                conv = nn.Conv2d(cin, w, 4, stride=2, padding=1)
            else:
                # even kernel: "same" output via explicit asymmetric padding in features()
                conv = nn.Conv2d(cin, w, 4, stride=1, padding=0)
            layers.append(SpectralNorm(conv) if smooth else conv)
            cin = w
        self.convs = nn.ModuleList(layers)
        feat = cin * (image_size // 4) ** 2
        fc = nn.Linear(feat, 1)
        self.fc = SpectralNorm(fc) if smooth else fc

    def activation(self, h):
        return torch.tanh(h) if self.smooth else F.leaky_relu(h, 0.2)

    def features(self, m):
        h = m
        for i, conv in enumerate(self.convs):
            if i >= 2:
                h = F.pad(h, (1, 2, 1, 2))
            h = self.activation(conv(h))
        return h

    def forward(self, m):
        return self.fc(self.features(m).flatten(1)).squeeze(1)


class ResidualEncoder(nn.Module):
    """Appearance code R: ``channels`` maps at 1/``downsample`` resolution."""

    def __init__(self, channels: int = 8, downsample: int = 4, width: int = 16):
        super().__init__()
        n_down = int(round(math.log2(downsample)))
        if 2**n_down != downsample:
            raise ConfigurationError("residual downsample must be a power of two")
        layers = [nn.Conv2d(1, width, 3, padding=1), nn.LeakyReLU(0.2)]
        for _ in range(n_down):
            layers += [nn.Conv2d(width, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(width, channels, 1), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Reconstructs an image from (soft mask, residual)."""

    def __init__(self, n_classes: int, residual_channels: int = 8, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(n_classes + residual_channels, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 1, 3, padding=1),
        )

    def forward(self, mask, residual):
        r = F.interpolate(residual, size=mask.shape[-2:], mode="bilinear", align_corners=False)
        return self.net(torch.cat([mask, r], dim=1))


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    image_size: int = 32
    n_classes: int = 4
    unet_depth: int = 3
    unet_base: int = 16
    adaptor_channels: int = 16
    disc_widths: Tuple[int, ...] = PAPER_DISC_WIDTHS
    use_adaptor: bool = True
    smooth: bool = True
    model: str = "gan"  # or "causal"
    residual_channels: int = 8
    residual_downsample: int = 4

    def __post_init__(self):
        self.disc_widths = tuple(int(w) for w in self.disc_widths)
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2")
        if self.model not in ("gan", "causal"):
            raise ConfigurationError(f"unknown model variant {self.model!r}")
        if self.image_size % (2 ** (self.unet_depth - 1)) or self.image_size % 4:
            raise ConfigurationError(
                f"image_size {self.image_size} incompatible with UNet depth {self.unet_depth}"
            )
        if self.model == "causal" and self.image_size % self.residual_downsample:
            raise ConfigurationError("image_size must be divisible by residual_downsample")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ModelBundle(nn.Module):
    """Adaptor -> segmentor -> discriminator, plus the optional causal pathway."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        self.adaptor = Adaptor(config.adaptor_channels)
        self.segmentor = UNet(config.n_classes, config.unet_depth, config.unet_base)
        self.discriminator = Discriminator(config.n_classes, config.image_size, config.disc_widths, config.smooth)
        if config.model == "causal":
            self.residual_encoder = ResidualEncoder(config.residual_channels, config.residual_downsample)
            self.decoder = Decoder(config.n_classes, config.residual_channels)
        else:
            self.residual_encoder = None
            self.decoder = None

    @property
    def is_causal(self) -> bool:
        return self.decoder is not None

    def adapt(self, x):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ContractError(f"expected (N, 1, H, W) images, got {tuple(x.shape)}")
        return self.adaptor(x) if self.config.use_adaptor else x

    def segment(self, x):
        """Σ∘Ω(x) as class probabilities."""
        return self.segmentor(self.adapt(x))

    def encode(self, x_prime):
        return self.segmentor(x_prime), self.residual_encoder(x_prime)

    def causal_forward(self, x):
        """Returns ``(x′, mask, residual, reconstruction)``."""
        if not self.is_causal:
            raise ConfigurationError("bundle has no decoder (model != causal)")
        xp = self.adapt(x)
        mask, r = self.encode(xp)
        return xp, mask, r, self.decoder(mask, r)

    def modules_by_role(self):
        roles = {"adaptor": self.adaptor, "segmentor": self.segmentor, "discriminator": self.discriminator}
        if self.is_causal:
            roles["residual_encoder"] = self.residual_encoder
            roles["decoder"] = self.decoder
        return roles

    def generator_parameters(self):
        """Everything trained by supervised/generator steps (not the discriminator)."""
        params = list(self.segmentor.parameters())
        if self.config.use_adaptor:
            params = list(self.adaptor.parameters()) + params
        if self.is_causal:
            params += list(self.residual_encoder.parameters()) + list(self.decoder.parameters())
        return params


def init_models(config: ModelConfig, seed: int = 0) -> ModelBundle:
    """Deterministically initialised bundle."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        bundle = ModelBundle(config, seed)
    return bundle


def parameter_hash(module: Optional[nn.Module]) -> str:
    """SHA-256 over parameters and buffers in ``state_dict`` order."""
    h = hashlib.sha256()
    if module is None:
        return h.hexdigest()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(bundle: ModelBundle, directory, epoch: int = 0, val_loss: float = float("nan"), extra=None) -> Path:
    """``model.pt`` (torch state dict) + ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tmp = d / "model.pt.tmp"
    torch.save(bundle.state_dict(), tmp)
    os.replace(tmp, d / "model.pt")
    manifest = {
        "format_version": MANIFEST_VERSION,
        "architecture": asdict(bundle.config),
        "seed": bundle.seed,
        "epoch": epoch,
        "val_loss": val_loss,
        "weights": "model.pt",
    }
    if extra:
        manifest.update(extra)
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, d / "manifest.json")
    return d


def load_checkpoint(directory) -> Tuple[ModelBundle, dict]:
    d = Path(directory)
    if not (d / "manifest.json").exists() or not (d / "model.pt").exists():
        raise MissingArtifactError(f"no checkpoint under {d}", code="MISSING_CHECKPOINT")
    manifest = json.loads((d / "manifest.json").read_text())
    config = ModelConfig.from_dict(manifest["architecture"])
    bundle = ModelBundle(config, manifest.get("seed", 0))
    bundle.load_state_dict(torch.load(d / manifest.get("weights", "model.pt"), weights_only=True))
    bundle.eval()
    return bundle, manifest
