"""Reconstruction-augmented variant: encoder -> (mask, residual), decoder -> adapted image.

The causal bundle is a :class:`~advttt.nets.ModelBundle` built with
``model="causal"``; it adds a residual encoder and a decoder next to the UNet.
The decoder reconstructs x′ = Ω(x), never x.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence, Tuple

import torch

from .datagen import DataSplit, PatientVolume
from .errors import ConfigurationError
from .nets import ModelBundle, ModelConfig, init_models
from .train import TrainConfig, TrainHistory, fit


def build_causal_bundle(config: ModelConfig, seed: int = 0) -> ModelBundle:
    return init_models(replace(config, model="causal"), seed)


def _require_causal(bundle: ModelBundle) -> None:
    if not bundle.is_causal:
        raise ConfigurationError("expected a causal bundle (model = causal)")


def encoder_forward(bundle: ModelBundle, x_prime: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Soft mask and residual code R for an adapted image batch."""
    _require_causal(bundle)
    return bundle.encode(x_prime)


def decoder_forward(bundle: ModelBundle, mask: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    _require_causal(bundle)
    return bundle.decoder(mask, residual)


def residual_shape(config: ModelConfig) -> Tuple[int, int, int]:
    side = config.image_size // config.residual_downsample
    return (config.residual_channels, side, side)


def fit_causal(
    bundle: ModelBundle,
    train_split: DataSplit,
    val_split: Sequence[PatientVolume],
    config: TrainConfig,
    progress: bool = False,
) -> Tuple[ModelBundle, TrainHistory]:
    """Supervised CE, adversarial loss and MAE reconstruction of Ω(x), alternated.

    The reconstruction term enters both the supervised and the generator step
    with weight ``config.recon_weight``; early stopping is on validation CE.
    """
    _require_causal(bundle)
    return fit(bundle, train_split, val_split, config, progress=progress)
