import numpy as np
import pytest
import torch

from advttt.causal import build_causal_bundle, decoder_forward, encoder_forward, fit_causal, residual_shape
from advttt.errors import ConfigurationError
from advttt.losses import mae_reconstruction
from advttt.nets import ModelConfig
from advttt.train import TrainConfig
from conftest import TINY_MODEL


def test_shapes(tiny_causal):
    cfg = tiny_causal.config
    x = torch.randn(2, 1, 32, 32)
    mask, r = encoder_forward(tiny_causal, tiny_causal.adapt(x))
    assert mask.shape == (2, 3, 32, 32)
    assert tuple(r.shape[1:]) == residual_shape(cfg) == (8, 8, 8)
    assert decoder_forward(tiny_causal, mask, r).shape == x.shape


def test_reconstruction_target_is_adapted_image(tiny_causal):
    x = torch.randn(2, 1, 32, 32)
    xp, mask, r, rec = tiny_causal.causal_forward(x)
    assert torch.allclose(xp, tiny_causal.adaptor(x))
    assert torch.allclose(rec, decoder_forward(tiny_causal, *encoder_forward(tiny_causal, xp)))


def test_gan_bundle_rejected(tiny_bundle):
    with pytest.raises(ConfigurationError):
        encoder_forward(tiny_bundle, torch.zeros(1, 1, 32, 32))


def test_decoder_gradcheck():
    b = build_causal_bundle(ModelConfig(**TINY_MODEL), 0).double()
    m = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    r = torch.rand(1, 8, 2, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(b.decoder, (m, r), eps=1e-6, atol=1e-7, rtol=1e-3)


def test_fit_causal_tracks_reconstruction(tiny_data):
    split, val, _ = tiny_data
    b = build_causal_bundle(ModelConfig(**TINY_MODEL), 0)
    b, h = fit_causal(b, split, val, TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=2, seed=0))
    rec = h.series("train", "rec")
    assert len(rec) == 2 and all(np.isfinite(rec))
    x = torch.from_numpy(val[0].images[:, None])
    with torch.no_grad():
        xp, _, _, out = b.causal_forward(x)
    assert mae_reconstruction(xp, out).item() < (xp - xp.mean()).abs().mean().item() * 1.5
