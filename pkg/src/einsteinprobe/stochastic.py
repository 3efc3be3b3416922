"""Brownian motion in a chart and integrals of bilinear forms along paths.

The simulator is Euler-Maruyama for the Ito SDE

    dX^k = -1/2 g^ij Gamma^k_ij dt + sigma^k_a dW^a,    sigma sigma^T = g^-1,

whose generator is half the Laplace-Beltrami operator. Paths stop at the
last state inside the chart's domain box.

Every path draws its Gaussian increments from its own Philox stream keyed by
``(seed, path_index)``, and the per-step arithmetic is elementwise, so a path
is bit-identical whether simulated alone, in a batch, or on any thread.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple, Sequence, Union

import numpy as np

from .expr import Expr, compile_expr
from .geometry import (
    MetricError,
    ScalarField,
    _christoffel,
    _mul,
    cholesky_components,
    contracted_christoffel_components,
    inverse_metric_fields,
    laplacian_values,
    metric_components,
    ricci_fields,
    spd_inverse_components,
)

SCHEME_VERSION = "euler-maruyama/1"
DEFAULT_BATCH = 256
_NOISE_CHUNK = 1024
_EVAL_POINTS = 40_000


# ---------------------------------------------------------------------------
# Paths


@dataclass(frozen=True, eq=False)
class Path:
    """One discretized Brownian trajectory, stopped at ``exit_time``."""

    spec: object
    T: float
    dt: float
    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (K+1, n)
    dW: np.ndarray  # (K, n)
    exit_time: float
    seed: int
    index: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def exited(self) -> bool:
        return self.exit_time < self.T

    def as_batch(self) -> "PathBatch":
        return PathBatch(
            spec=self.spec,
            T=self.T,
            dt=self.dt,
            seed=self.seed,
            indices=np.array([self.index]),
            times=self.times,
            states=self.states[:, None, :],
            dW=self.dW[:, None, :],
            n_steps=np.array([self.n_steps]),
        )


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Several paths on a common time grid.

    A path that left the chart after ``n_steps[p]`` steps keeps its last state
    for the rest of the grid and has zero increments there.
    """

    spec: object
    T: float
    dt: float
    seed: int
    indices: np.ndarray  # (P,)
    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (K+1, P, n)
    dW: np.ndarray  # (K, P, n)
    n_steps: np.ndarray  # (P,)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def exit_times(self) -> np.ndarray:
        return self.times[self.n_steps]

    @property
    def step_sizes(self) -> np.ndarray:
        return np.diff(self.times)

    def active_mask(self) -> np.ndarray:
        """(K, P) boolean: step k belongs to path p."""
        return np.arange(len(self.times) - 1)[:, None] < self.n_steps[None, :]

    def path(self, p: int) -> Path:
        k = int(self.n_steps[p])
        return Path(
            spec=self.spec,
            T=self.T,
            dt=self.dt,
            times=self.times[: k + 1].copy(),
            states=self.states[: k + 1, p].copy(),
            dW=self.dW[:k, p].copy(),
            exit_time=float(self.times[k]),
            seed=self.seed,
            index=int(self.indices[p]),
        )

    def __iter__(self) -> Iterator[Path]:
        return (self.path(p) for p in range(len(self)))


def time_grid(T: float, dt: float) -> np.ndarray:
    if not (dt > 0 and math.isfinite(dt)):
        raise ValueError("dt must be positive")
    if not (T >= dt):
        raise ValueError("T must be at least dt")
    K = int(math.ceil(T / dt - 1e-9))
    return np.minimum(np.arange(K + 1) * dt, T)


class _StepCoefficients:
    """Drift and diffusion factor of the chart SDE at a batch of points."""

    def __init__(self, spec):
        self.n = spec.dim
        self.spec = spec
        self.cm = spec.compiled
        self.constant = self.cm.is_constant
        self._cached = None

    def __call__(self, X: np.ndarray):
        if self._cached is not None:
            return self._cached
        n = self.n
        try:
            ginv = spd_inverse_components(metric_components(self.spec, X), n)
        except MetricError as exc:
            raise MetricError(f"metric not positive definite along path: {exc}") from exc
        drift = [_mul(-0.5, w) for w in contracted_christoffel_components(self.spec, X, ginv)]
        sigma = cholesky_components(ginv, n)
        out = (drift, sigma)
        if self.constant:
            self._cached = out
        return out


# ---------------------------------------------------------------------------
# Simulation


def _path_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)])))


def simulate_batch(spec, x0, T: float, dt: float, seed: int, indices: Sequence[int]) -> PathBatch:
    """Simulate the paths ``indices`` of the ensemble keyed by ``seed``."""
    n = spec.dim
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (n,):
        raise ValueError(f"x0 must have {n} components")
    if not spec.contains(x0):
        raise ValueError(f"x0 {x0.tolist()} lies outside the domain box")
    times = time_grid(T, dt)
    K = len(times) - 1
    indices = np.asarray(indices, dtype=np.int64)
    P = len(indices)
    lo, hi = spec.lower, spec.upper
    sqrt_dt = np.sqrt(np.diff(times))

    rngs = [_path_rng(seed, int(i)) for i in indices]
    coeffs = _StepCoefficients(spec)
    states = np.empty((K + 1, P, n))
    dW = np.zeros((K, P, n))
    n_steps = np.full(P, K, dtype=np.int64)
    active = np.ones(P, dtype=bool)
    x = np.broadcast_to(x0, (P, n)).copy()
    states[0] = x
    cols = [x[:, i] for i in range(n)]
    noise = None
    for k in range(K):
        c = k % _NOISE_CHUNK
        if c == 0:
            m = min(_NOISE_CHUNK, K - k)
            noise = np.stack([r.standard_normal((m, n)) for r in rngs], axis=1)
        dw = noise[c] * sqrt_dt[k]
        drift, sigma = coeffs(x)
        h = times[k + 1] - times[k]
        new = []
        for i in range(n):
            acc = cols[i] + drift[i] * h
            for j in range(i + 1):
                if not (isinstance(sigma[i][j], float) and sigma[i][j] == 0.0):
                    acc = acc + sigma[i][j] * dw[:, j]
            new.append(acc)
        x_new = np.stack([np.broadcast_to(v, (P,)) for v in new], axis=-1)
        inside = np.all((x_new >= lo) & (x_new <= hi), axis=-1)
        leaving = active & ~inside
        if leaving.any():
            n_steps[leaving] = k
            active = active & inside
        if active.any():
            x = np.where(active[:, None], x_new, x)
            dW[k] = np.where(active[:, None], dw, 0.0)
        states[k + 1] = x
        cols = [x[:, i] for i in range(n)]
        if not active.any():
            states[k + 2 :] = x
            break
    return PathBatch(spec=spec, T=float(T), dt=float(dt), seed=int(seed), indices=indices, times=times, states=states, dW=dW, n_steps=n_steps)


def simulate_bm(spec, x0, T: float, dt: float, seed: int, index: int = 0) -> Path:
    """Simulate a single g-Brownian motion path from ``x0``."""
    return simulate_batch(spec, x0, T, dt, seed, [index]).path(0)


def thread_count() -> int:
    raw = os.environ.get("EINSTEINPROBE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return min(8, os.cpu_count() or 1)


@dataclass(frozen=True)
class Ensemble:
    """A lazily simulated ensemble of ``n_paths`` paths.

    Paths are simulated in fixed batches of ``batch_size``; results are
    reassembled in path order, so the outcome never depends on how many
    worker threads ran.
    """

    spec: object
    x0: tuple[float, ...]
    T: float
    dt: float
    seed: int
    n_paths: int
    batch_size: int = DEFAULT_BATCH

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("ensemble needs at least one path")
        time_grid(self.T, self.dt)

    def __len__(self) -> int:
        return self.n_paths

    def _chunks(self) -> list[range]:
        return [range(s, min(s + self.batch_size, self.n_paths)) for s in range(0, self.n_paths, self.batch_size)]

    def batches(self) -> Iterator[PathBatch]:
        for r in self._chunks():
            yield simulate_batch(self.spec, self.x0, self.T, self.dt, self.seed, r)

    def map(self, fn: Callable[[PathBatch], np.ndarray], threads: int | None = None) -> np.ndarray:
        """Apply a per-batch function and concatenate per-path results in order."""
        chunks = self._chunks()

        def work(r: range):
            return np.asarray(fn(simulate_batch(self.spec, self.x0, self.T, self.dt, self.seed, r)))

        threads = thread_count() if threads is None else threads
        if threads <= 1 or len(chunks) == 1:
            parts = [work(r) for r in chunks]
        else:
            with ThreadPoolExecutor(max_workers=min(threads, len(chunks))) as pool:
                parts = list(pool.map(work, chunks))
        return np.concatenate(parts, axis=0)


def simulate_ensemble(spec, x0, T: float, dt: float, seed: int, n_paths: int, batch_size: int = DEFAULT_BATCH) -> Ensemble:
    x0 = np.asarray(spec.center if x0 is None else x0, dtype=float)
    if not spec.contains(x0):
        raise ValueError(f"x0 {x0.tolist()} lies outside the domain box")
    return Ensemble(spec, tuple(float(v) for v in x0), float(T), float(dt), int(seed), int(n_paths), batch_size)


Paths = Union[Path, PathBatch, Ensemble, Sequence[Path]]


def _per_path(paths: Paths, fn: Callable[[PathBatch], np.ndarray]):
    """Evaluate a batch function; a single Path yields a scalar."""
    if isinstance(paths, Path):
        return float(fn(paths.as_batch())[0])
    if isinstance(paths, PathBatch):
        return fn(paths)
    if isinstance(paths, Ensemble):
        return paths.map(fn)
    paths = list(paths)
    if not paths:
        raise ValueError("empty ensemble")
    return np.array([float(fn(p.as_batch())[0]) for p in paths])


# ---------------------------------------------------------------------------
# Bilinear form fields


class BilinearFormField:
    """A rule assigning a symmetric n x n matrix to each chart point.

    Fields support ``+``, ``-`` and scalar multiplication, so that
    ``BilinearFormField.ricci(spec) - (c / n) * BilinearFormField.metric(spec)``
    is the deviation form.
    """

    def __init__(self, spec, fn: Callable[[np.ndarray], np.ndarray], label: str, needs_curvature: bool = False):
        self.spec = spec
        self._fn = fn
        self.label = label
        self.needs_curvature = needs_curvature

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        b = self._fn(X)
        return np.broadcast_to(b, X.shape[:-1] + (self.spec.dim, self.spec.dim))

    def __repr__(self) -> str:
        return f"BilinearFormField({self.label})"

    @classmethod
    def metric(cls, spec) -> "BilinearFormField":
        return cls(spec, spec.compiled.metric, "g")

    @classmethod
    def zero(cls, spec) -> "BilinearFormField":
        n = spec.dim
        return cls(spec, lambda X: np.zeros(X.shape[:-1] + (n, n)), "0")

    @classmethod
    def ricci(cls, spec) -> "BilinearFormField":
        # path states are already known to be SPD points, so skip the check
        return cls(spec, lambda X: ricci_fields(spec, X)[1], "ricci", needs_curvature=True)

    @classmethod
    def from_exprs(cls, spec, matrix: Sequence[Sequence[Expr]], label: str = "b") -> "BilinearFormField":
        n = spec.dim
        fns = [[compile_expr(matrix[i][j], spec.params) for j in range(n)] for i in range(n)]
        for i in range(n):
            for j in range(i):
                if matrix[i][j] != matrix[j][i]:
                    raise ValueError(f"bilinear form entries [{i}][{j}] and [{j}][{i}] differ")

        def fn(X):
            out = np.empty(X.shape[:-1] + (n, n))
            for i in range(n):
                for j in range(n):
                    out[..., i, j] = fns[i][j](X)
            return out

        return cls(spec, fn, label)

    def __add__(self, other: "BilinearFormField") -> "BilinearFormField":
        if not isinstance(other, BilinearFormField):
            return NotImplemented
        a, b = self._fn, other._fn
        return BilinearFormField(self.spec, lambda X: a(X) + b(X), f"({self.label} + {other.label})", self.needs_curvature or other.needs_curvature)

    def __mul__(self, k: float) -> "BilinearFormField":
        k = float(k)
        a = self._fn
        return BilinearFormField(self.spec, lambda X: k * a(X), f"{k:g}*{self.label}", self.needs_curvature)

    __rmul__ = __mul__

    def __neg__(self) -> "BilinearFormField":
        return self * -1.0

    def __sub__(self, other: "BilinearFormField") -> "BilinearFormField":
        return self + (-other)


def _chunked_points(batch: PathBatch, cost: int = 1) -> Iterator[tuple[slice, np.ndarray]]:
    """Yield (time slice, states) over left endpoints, bounded in size."""
    K = len(batch.times) - 1
    P = len(batch)
    step = max(1, _EVAL_POINTS // (P * cost))
    for s in range(0, K, step):
        sl = slice(s, min(s + step, K))
        yield sl, batch.states[sl]


def _cost(b: BilinearFormField) -> int:
    return b.spec.dim ** 2 if b.needs_curvature else 1


def _bilinear_batch(b: BilinearFormField, batch: PathBatch) -> np.ndarray:
    dX = np.diff(batch.states, axis=0)
    total = np.zeros(len(batch))
    for sl, X in _chunked_points(batch, _cost(b)):
        B = b(X)
        d = dX[sl]
        total += np.einsum("kpij,kpi,kpj->p", B, d, d)
    return total


def _gtrace_batch(b: BilinearFormField, batch: PathBatch) -> np.ndarray:
    spec = batch.spec
    h = batch.step_sizes
    mask = batch.active_mask()
    total = np.zeros(len(batch))
    for sl, X in _chunked_points(batch, _cost(b)):
        ginv = inverse_metric_fields(spec, X)
        tr = np.einsum("kpij,kpij->kp", ginv, b(X))
        total += np.sum(np.where(mask[sl], tr, 0.0) * h[sl, None], axis=0)
    return total


def quadratic_variation_increments(path: Path) -> np.ndarray:
    """Per-step outer products ``dX_k dX_k^T`` with shape (K, n, n)."""
    dX = np.diff(path.states, axis=0)
    return dX[:, :, None] * dX[:, None, :]


def quadratic_variation(paths: Paths) -> np.ndarray:
    """Summed realized covariation matrix per path."""

    def fn(batch: PathBatch):
        dX = np.diff(batch.states, axis=0)
        return np.einsum("kpi,kpj->pij", dX, dX)

    if isinstance(paths, Path):
        return fn(paths.as_batch())[0]
    return _per_path(paths, fn)


def integrate_bilinear(spec, b: BilinearFormField, paths: Paths):
    """Integral of ``b`` along the path: ``sum_k b_ij(X_k) dX^i_k dX^j_k``."""
    return _per_path(paths, lambda batch: _bilinear_batch(b, batch))


def integrate_trace(spec, b: BilinearFormField, paths: Paths):
    """Left-endpoint time integral of the metric trace of ``b`` up to exit."""
    return _per_path(paths, lambda batch: _gtrace_batch(b, batch))


class LemmaResidual(NamedTuple):
    residual: float | np.ndarray
    bilinear: float | np.ndarray
    trace: float | np.ndarray


def lemma_residual(spec, b: BilinearFormField, paths: Paths) -> LemmaResidual:
    """Difference between the bracket integral of ``b`` and its trace integral."""

    def fn(batch: PathBatch):
        bi = _bilinear_batch(b, batch)
        tr = _gtrace_batch(b, batch)
        return np.stack([bi - tr, bi, tr], axis=-1)

    out = _per_path(paths, fn) if not isinstance(paths, Path) else fn(paths.as_batch())[0]
    out = np.asarray(out)
    if out.ndim == 1:
        return LemmaResidual(float(out[0]), float(out[1]), float(out[2]))
    return LemmaResidual(out[:, 0], out[:, 1], out[:, 2])


def predicted_residual_std(spec, b: BilinearFormField, paths: Paths):
    """Leading-order per-path standard deviation of :func:`lemma_residual`.

    For Brownian increments the bracket sum fluctuates around the trace
    integral with variance ``2 dt * int tr((g^-1 b)^2) dt``.
    """

    def fn(batch: PathBatch):
        h = batch.step_sizes
        mask = batch.active_mask()
        total = np.zeros(len(batch))
        for sl, X in _chunked_points(batch, _cost(b)):
            A = inverse_metric_fields(spec, X) @ b(X)
            q = np.einsum("kpij,kpji->kp", A, A)
            total += np.sum(np.where(mask[sl], q, 0.0) * (h[sl, None] ** 2), axis=0)
        return np.sqrt(2.0 * total)

    return _per_path(paths, fn)


# ---------------------------------------------------------------------------
# Martingale test


class MeanStderr(NamedTuple):
    mean: float
    stderr: float
    n: int


def mean_stderr(values) -> MeanStderr:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty ensemble")
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return MeanStderr(float(np.mean(v)), se, int(v.size))


def compensated_values(spec, f: Expr, paths: Paths):
    """Per-path ``f(X_zeta) - f(X_0) - 1/2 sum_k Lap f(X_k) dt_k``."""
    field = ScalarField(spec, f)

    def fn(batch: PathBatch):
        h = batch.step_sizes
        mask = batch.active_mask()
        P = len(batch)
        end = batch.states[batch.n_steps, np.arange(P)]
        total = field.value(end) - field.value(batch.states[0])
        comp = np.zeros(P)
        for sl, X in _chunked_points(batch):
            lap = laplacian_values(spec, field, X)
            comp += np.sum(np.where(mask[sl], lap, 0.0) * h[sl, None], axis=0)
        return total - 0.5 * comp

    return _per_path(paths, fn)


def martingale_defect(spec, f: Expr, paths: Paths) -> MeanStderr:
    """Mean and standard error of the compensated process at the final time."""
    if isinstance(paths, Path):
        paths = [paths]
    values = np.atleast_1d(compensated_values(spec, f, paths))
    if values.size == 0:
        raise ValueError("empty ensemble")
    return mean_stderr(values)


def drift_at(spec, x) -> np.ndarray:
    """Ito drift ``-1/2 g^ij Gamma^k_ij`` of the chart SDE (reference form)."""
    X = np.asarray(x, dtype=float)
    g = spec.compiled.metric(X)
    ginv = np.linalg.inv(g)
    gamma = _christoffel(ginv, spec.compiled.dmetric(X))
    return -0.5 * np.einsum("...ij,...kij->...k", ginv, gamma)
