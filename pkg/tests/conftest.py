import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sparseflow import netspec
from sparseflow.netspec import CONV_FATRELU, CONV_LIF, FLOW_HEAD, LayerSpec, NetworkSpec

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_spec(rng, kind, channels, n_conv=None, recurrent=None, pool_at=None, in_channels=2):
    """Small random conv stack plus flow head; thresholds low enough that layers stay active."""
    n_conv = int(rng.integers(1, 4)) if n_conv is None else n_conv
    layers = []
    cin = in_channels
    for i in range(n_conv):
        rec = bool(rng.random() < 0.5) if recurrent is None else recurrent
        pool = pool_at == i
        rec = rec and not pool
        w = rng.uniform(-1, 1, (3, 3, cin, channels)) * np.sqrt(3.0 / (9 * cin))
        rw = rng.uniform(-1, 1, (3, 3, channels, channels)) * np.sqrt(1.0 / (9 * channels)) if rec else None
        if kind == "ann":
            layers.append(LayerSpec(CONV_FATRELU, w, rng.uniform(-0.1, 0.1, channels), np.full(channels, 0.05),
                                    None, rw, pool))
        else:
            layers.append(LayerSpec(CONV_LIF, w, None, rng.uniform(0.2, 0.6, channels),
                                    rng.uniform(0.2, 0.8, channels), rw, pool))
        cin = channels
    layers.append(LayerSpec(FLOW_HEAD, rng.uniform(-1, 1, (1, 1, cin, 2)), np.zeros(2)))
    return NetworkSpec(layers).validate()


def random_frames(rng, n, h, w, density=0.4):
    return [(rng.poisson(0.7, (h, w, 2)) * (rng.random((h, w, 1)) < density)).astype(np.int32) for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def firenet_ann():
    return netspec.firenet("ann", channels=32, seed=0)
