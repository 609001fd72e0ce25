"""Shared fixtures.

The expensive fixture is the fully trained model (3000 steps, a few
minutes on one core); it is session-scoped so the acceptance tests
share one training run.  Set DITLAB_TEST_CACHE to a directory to reuse
the trained checkpoint across pytest invocations while iterating
locally; leave it unset for an honest end-to-end run.
"""

import json
import os
import time
from dataclasses import dataclass

import pytest
from hypothesis import settings

from ditlab import (
    DitConfig,
    TrainConfig,
    init_weights,
    load_checkpoint,
    make_dataset,
    save_checkpoint,
    train,
)
from ditlab.train import randomize_output_projection

settings.register_profile("ditlab", derandomize=True, max_examples=50)
settings.load_profile("ditlab")


@dataclass
class TrainedModel:
    weights: object
    initial_loss: float
    final_loss: float
    train_seconds: float


def _train_default():
    cfg = DitConfig()
    images, labels, _ = make_dataset(256, seed=0, noise_sigma=0.05)
    weights = init_weights(cfg, seed=0)
    tcfg = TrainConfig(batch=32, steps=3000, lr=1e-3, cfg_dropout=0.1, seed=0)
    t0 = time.monotonic()
    result = train(weights, images, labels, tcfg)
    elapsed = time.monotonic() - t0
    return TrainedModel(
        result.weights, result.initial_loss, result.final_loss, elapsed
    )


@pytest.fixture(scope="session")
def trained_model():
    """The default-recipe trained model, shared across the session."""
    cache = os.environ.get("DITLAB_TEST_CACHE")
    if cache:
        ckpt = os.path.join(cache, "trained.ckpt")
        meta = os.path.join(cache, "trained.json")
        if os.path.exists(ckpt) and os.path.exists(meta):
            with open(meta) as fh:
                m = json.load(fh)
            return TrainedModel(
                load_checkpoint(ckpt),
                m["initial_loss"],
                m["final_loss"],
                m["train_seconds"],
            )
    tm = _train_default()
    if cache:
        os.makedirs(cache, exist_ok=True)
        save_checkpoint(tm.weights, os.path.join(cache, "trained.ckpt"))
        with open(os.path.join(cache, "trained.json"), "w") as fh:
            json.dump(
                {
                    "initial_loss": tm.initial_loss,
                    "final_loss": tm.final_loss,
                    "train_seconds": tm.train_seconds,
                },
                fh,
            )
    return tm


@pytest.fixture(scope="session")
def small_config():
    """A 2-layer, 2-head model on 8x8 images; fast enough for sampler
    and search tests that need many forward passes."""
    return DitConfig(
        image_size=8,
        patch=2,
        layers=2,
        heads_per_layer=2,
        model_dim=8,
        head_dim=4,
        mlp_ratio=2,
    )


@pytest.fixture(scope="session")
def small_weights(small_config):
    """Small untrained model with a nonzero output projection, so
    forwards produce nonzero velocities without any training."""
    return randomize_output_projection(init_weights(small_config, seed=0), seed=1)
