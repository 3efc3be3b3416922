"""Deterministic low-discrepancy samples of a chart's domain box."""

from __future__ import annotations

import numpy as np
from scipy.stats import qmc


def sample_domain(spec, count: int, margin: float = 0.0) -> np.ndarray:
    """Return ``count`` Halton points strictly inside the domain box.

    ``margin`` shrinks the box by that fraction of its width on each side.
    The sequence is unscrambled, so the result depends only on the box.
    """
    if count < 1:
        raise ValueError("count must be positive")
    u = qmc.Halton(d=spec.dim, scramble=False).random(count + 1)[1:]
    lo, hi = spec.lower, spec.upper
    width = hi - lo
    return lo + margin * width + u * width * (1.0 - 2.0 * margin)
