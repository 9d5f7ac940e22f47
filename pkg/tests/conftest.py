import numpy as np
import pytest

import pathfilter as pf
from pathfilter.tracer import TraceOptions

REF_SEED = 999


@pytest.fixture(scope="session")
def cornell64():
    return pf.cornell_box(64, 64)


@pytest.fixture(scope="session")
def centered_options():
    """Pixel-centered rays: isolates path-space noise from coverage noise."""
    return TraceOptions(pixel_jitter=False)


@pytest.fixture(scope="session")
def cornell64_reference(cornell64, centered_options):
    """1024-spp reference image shared by the image-error tests."""
    return pf.trace(cornell64, spp=1024, seed=REF_SEED,
                    options=centered_options).image


def random_stream(n, seed, n_keys=None, spread=100.0):
    """Synthetic vertex stream with duplicate keys, for table-level tests."""
    r = np.random.default_rng(seed)
    n_keys = n_keys or max(4, n // 8)
    pts = r.uniform(-spread, spread, (n_keys, 3))
    pick = r.integers(0, n_keys, n)
    normals = r.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return pf.VertexStream(
        position=pts[pick],
        normal=normals,
        omega_r=np.tile(np.array([0.0, 0.0, 1.0]), (n, 1)),
        contribution=r.uniform(0.0, 4.0, (n, 3)),
        throughput=np.ones((n, 3)),
        pixel=r.integers(0, 4096, n),
        sample=np.zeros(n, np.int64),
        layer_id=np.zeros(n, np.int64),
        camera_distance=r.uniform(1.0, 50.0, n),
    )
