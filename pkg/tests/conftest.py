"""Shared fixtures: precision control, a tiny VAE, small image sets and IDX files."""

from __future__ import annotations

import numpy as np
import pytest

from rose_ood.config import AppConfig, ModelConfig
from rose_ood.data import gaussian_blur, gen_noise, write_idx
from rose_ood.pipeline import RosePipeline
from rose_ood.schemas import LayerGradient, LayerGradientSet
from rose_ood.tensor import Rng, set_precision
from rose_ood.vae import build_vae

TINY_MODEL = {"input_shape": [1, 16, 16], "channels": 2, "latent_dim": 3}


@pytest.fixture(autouse=True)
def _restore_precision():
    set_precision("float32")
    yield
    set_precision("float32")


@pytest.fixture
def float64():
    set_precision("float64")
    yield
    set_precision("float32")


@pytest.fixture
def tiny_model(float64):
    return build_vae(ModelConfig(**TINY_MODEL), seed=0)


@pytest.fixture
def smooth_images():
    """Blurred noise: structured in-distribution stand-in, 32 images of 16x16."""
    return gaussian_blur(gen_noise(32, (16, 16), seed=7), 1.5)


@pytest.fixture
def idx_path(tmp_path, smooth_images):
    path = tmp_path / "smooth.idx"
    write_idx(smooth_images, str(path))
    return str(path)


@pytest.fixture
def tiny_config(tmp_path):
    return AppConfig.from_dict(
        {
            "paths": {"artifacts_dir": str(tmp_path / "artifacts")},
            "model": TINY_MODEL,
            "train": {"epochs": 1, "batch_size": 8},
            "fisher": {"n_samples": 24, "batch_size": 8},
            "score": {"batch_size": 8, "nll_k": 4},
            "runtime": {"precision": "float64"},
        }
    )


@pytest.fixture
def fitted(tiny_config, smooth_images):
    """(pipeline, model, artifact) with EKFAC fitted on the smooth images."""
    pipeline = RosePipeline(tiny_config)
    model = build_vae(tiny_config.model, seed=0)
    artifact = pipeline.fit(model, smooth_images)
    return pipeline, model, artifact


def make_gradient_sets(n, p, q, positions=1, seed=0, name="layer", scale=1.0):
    """Random per-sample layer statistics with ``grad == delta.T @ h``."""
    rng = Rng(seed)
    sets = []
    for i in range(n):
        stream = rng.spawn(i)
        h = np.asarray(stream.gaussian((positions, p)), dtype=np.float64)
        delta = scale * np.asarray(stream.gaussian((positions, q)), dtype=np.float64)
        sets.append(LayerGradientSet(i, {name: LayerGradient(name, delta.T @ h, h, delta)}))
    return sets
