"""Shared fixtures: toy datasets and trained models for the acceptance suite.

Model training takes a few minutes, so everything is session-scoped.  Set
PUREKIT_TEST_CACHE to a directory to reuse trained checkpoints across pytest
runs while iterating locally; the cache key includes the training recipe, so
stale models are never reused after a recipe change.
"""

import hashlib
import os
from pathlib import Path

import numpy as np
import pytest

from purekit.data import make_textures
from purekit.ddpm import (DdpmTrainConfig, load_predictor, make_schedule,
                          save_predictor, train_ddpm)
from purekit.ebm import (EbmTrainConfig, load_energy_model, save_energy_model,
                         train_ebm)

# Desk-scale training recipe shared by the acceptance fixtures: short
# persistent chains started from data plus a weak Gaussian reference measure
# so the sampling dynamics have genuine attractors.
EBM_RECIPE = dict(steps=800, langevin_steps=30, batch=32, width=16, lr=1e-4,
                  noise_scale=1.0, bank_init="data", reference_precision=0.02)
DDPM_RECIPE = dict(prefix_steps=250, epochs=120, batch=64, width=16, lr=0.02,
                   momentum=0.9)

# Purification noise scale used by the desk-scale defense runs: the toy
# landscape balances gradient and noise forces near 0.25 rather than 1.
DEFENSE_NOISE_SCALE = 0.25


def _cache_dir():
    path = os.environ.get("PUREKIT_TEST_CACHE")
    if not path:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _recipe_tag(kind, **kw):
    blob = kind + repr(sorted(kw.items()))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def textures2():
    return make_textures(512, 2, seed=100, name="textures2")


@pytest.fixture(scope="session")
def textures4():
    return make_textures(1024, 4, seed=200, name="textures4")


@pytest.fixture(scope="session")
def textures4_test():
    return make_textures(512, 4, seed=201, name="textures4-test")


def _trained_ebm(images, seed):
    cfg = EbmTrainConfig(seed=seed, **EBM_RECIPE)
    cache = _cache_dir()
    if cache is not None:
        tag = _recipe_tag("ebm", seed=seed, n=images.shape[0],
                          shape=images.shape[1:], **EBM_RECIPE)
        prefix = cache / f"ebm_{tag}"
        if prefix.with_suffix(".pgck").exists():
            return load_energy_model(prefix)
        model = train_ebm(images, cfg).model
        save_energy_model(model, prefix)
        return model
    return train_ebm(images, cfg).model


@pytest.fixture(scope="session")
def ebm2(textures2):
    return _trained_ebm(textures2.images, seed=51)


@pytest.fixture(scope="session")
def ebm4(textures4):
    return _trained_ebm(textures4.images, seed=52)


@pytest.fixture(scope="session")
def ddpm4(textures4):
    schedule = make_schedule(1000, 1e-4, 0.02)
    cfg = DdpmTrainConfig(seed=61, **DDPM_RECIPE)
    cache = _cache_dir()
    if cache is not None:
        tag = _recipe_tag("ddpm", seed=61, n=textures4.images.shape[0],
                          **DDPM_RECIPE)
        prefix = cache / f"ddpm_{tag}"
        if prefix.with_suffix(".pgck").exists():
            return load_predictor(prefix)
        predictor, _ = train_ddpm(textures4.images, schedule, cfg)
        save_predictor(predictor, schedule, prefix)
        return predictor, schedule
    predictor, _ = train_ddpm(textures4.images, schedule, cfg)
    return predictor, schedule
