import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_onehot(rng, shape, c):
    """Random hard ``(*shape, c)`` mask as float32."""
    return np.eye(c, dtype=np.float32)[rng.integers(0, c, size=shape)]


@pytest.fixture(scope="session")
def tiny_data():
    from advttt.datagen import generate_synthetic_dataset, preprocess_volume, split_patients

    vols = [preprocess_volume(v, 1.51, 32) for v in generate_synthetic_dataset(10, 2, 32, 3, seed=0)]
    return split_patients(vols, (0.4, 0.2, 0.4), labelled_frac=0.5, seed=0)


TINY_MODEL = dict(image_size=32, n_classes=3, unet_depth=2, unet_base=4, adaptor_channels=4, disc_widths=(4, 4, 8, 8, 8))


@pytest.fixture
def tiny_bundle():
    from advttt.nets import ModelConfig, init_models

    return init_models(ModelConfig(**TINY_MODEL), seed=0)


@pytest.fixture
def tiny_causal():
    from advttt.nets import ModelConfig, init_models

    return init_models(ModelConfig(**TINY_MODEL, model="causal"), seed=0)


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE = {}


def record_acceptance(number, name, ok, detail=""):
    _ACCEPTANCE[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
