import sys
from pathlib import Path

import numpy as np
import pytest

from einsteinprobe.manifold import CATALOG_KEYS, builtin_spec

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def catalog():
    return {key: builtin_spec(key) for key in CATALOG_KEYS}


@pytest.fixture(scope="session")
def sphere(catalog):
    return catalog["sphere2"]


@pytest.fixture(scope="session")
def euclid(catalog):
    return catalog["euclidean2"]


@pytest.fixture(scope="session")
def s2s1(catalog):
    return catalog["s2_x_s1"]


def interior_points(spec, count, seed=0, margin=0.02):
    rng = np.random.default_rng(seed)
    lo, hi = spec.lower, spec.upper
    w = hi - lo
    return lo + margin * w + rng.random((count, spec.dim)) * w * (1 - 2 * margin)
