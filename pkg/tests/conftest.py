import numpy as np
import pytest

import nas_rt.backend as backend
from nas_rt import latency as lat
from nas_rt import space


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=backend.available_backends())
def kernel_backend(request):
    """Run kernel-facing tests against every built backend."""
    previous = backend.active.NAME
    backend.use(request.param)
    yield request.param
    backend.use(previous)


@pytest.fixture
def tiny_cfg():
    """Smallest grid that still has all three cell kinds."""
    return space.SearchConfig(layers=2, scales=2, nodes_per_cell=2,
                              base_channels=4, k_partial=2, num_classes=2,
                              input_shape=(4, 4, 4), n_fusion=2).validate()


@pytest.fixture
def toy_cfg():
    """The desk-scale reference configuration."""
    return space.SearchConfig(layers=4, scales=3, nodes_per_cell=2,
                              base_channels=4, k_partial=2, num_classes=2,
                              input_shape=(8, 16, 16), n_fusion=2).validate()


def synthetic_table(cfg, seed=0, base=1e-4):
    """Deterministic fake latency table covering a config's signature set;
    heavier ops get larger made-up entries (zero/identity stay free)."""
    rng = np.random.default_rng(seed)
    entries = {}
    for sig in lat.enumerate_signatures(cfg):
        if sig.op in ("zero", "identity"):
            entries[sig] = 0.0
        else:
            work = sig.cin * sig.cout * sig.d * sig.h * sig.w
            entries[sig] = base * (1.0 + 0.1 * rng.random()) * (1 + work / 1e4)
    return lat.LatencyTable(entries, {"host": "synthetic"})


@pytest.fixture
def tiny_table(tiny_cfg):
    return synthetic_table(tiny_cfg)


@pytest.fixture
def toy_table(toy_cfg):
    return synthetic_table(toy_cfg)
