"""Curvature of a chart metric: Christoffel symbols, Riemann, Ricci, scalar.

Conventions
-----------
``gamma[..., i, j, k]`` is the Christoffel symbol with upper index ``i``.
``riemann[..., l, i, j, k]`` is the component ``R^l_{ijk}`` of
``R(d_i, d_j) d_k`` with the sign convention

    R(X, Y) = nabla_[X,Y] - [nabla_X, nabla_Y],

so that the Ricci tensor ``r_ij = R^k_{ikj}`` (trace of ``Z -> R(X, Z) Y``)
is positive on the round sphere. Lowering the upper index into the last
slot, ``R_{ijkl} = g_{lm} R^m_{ijk}``, gives sectional curvature
``R_{1212} / (g_11 g_22 - g_12^2)``.

All batched functions take points of shape ``(..., n)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .expr import Expr, compile_expr, differentiate


class MetricError(ValueError):
    """Metric is not symmetric positive definite at some point."""

    def __init__(self, message: str, point=None, minor: int | None = None):
        super().__init__(message)
        self.point = None if point is None else [float(v) for v in np.ravel(point)]
        self.minor = minor


def _broadcast(value, shape) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), shape)


class CompiledMetric:
    """Vectorized metric components and their first and second derivatives."""

    def __init__(self, spec):
        self.spec = spec
        self.n = n = spec.dim
        params = spec.params
        self.exprs = spec.metric
        self.fns = [[compile_expr(spec.metric[i][j], params) for j in range(n)] for i in range(n)]
        self.d_exprs = [
            [[differentiate(spec.metric[i][j], k) for k in range(n)] for j in range(n)] for i in range(n)
        ]
        self.d_fns = [[[compile_expr(self.d_exprs[i][j][k], params) for k in range(n)] for j in range(n)] for i in range(n)]

    @cached_property
    def d2_fns(self):
        n = self.n
        params = self.spec.params
        out = [[[[None] * n for _ in range(n)] for _ in range(n)] for _ in range(n)]
        for i in range(n):
            for j in range(i, n):
                for k in range(n):
                    for l in range(k, n):
                        fn = compile_expr(differentiate(self.d_exprs[i][j][k], l), params)
                        out[i][j][k][l] = out[j][i][k][l] = out[i][j][l][k] = out[j][i][l][k] = fn
        return out

    @property
    def is_constant(self) -> bool:
        return all(fn.constant for row in self.fns for fn in row)

    def _fill(self, fns, X: np.ndarray, tail: tuple[int, ...]) -> np.ndarray:
        batch = X.shape[:-1]
        out = np.empty(batch + tail)
        for idx in np.ndindex(*tail):
            f = fns
            for a in idx:
                f = f[a]
            out[(Ellipsis,) + idx] = _broadcast(f(X), batch)
        return out

    def metric(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        n = self.n
        out = np.empty(X.shape[:-1] + (n, n))
        for i in range(n):
            for j in range(i, n):
                v = _broadcast(self.fns[i][j](X), X.shape[:-1])
                out[..., i, j] = v
                out[..., j, i] = v
        return out

    def dmetric(self, X) -> np.ndarray:
        """``out[..., i, j, k] = d_k g_ij``."""
        X = np.asarray(X, dtype=float)
        n = self.n
        out = np.empty(X.shape[:-1] + (n, n, n))
        for i in range(n):
            for j in range(i, n):
                for k in range(n):
                    v = _broadcast(self.d_fns[i][j][k](X), X.shape[:-1])
                    out[..., i, j, k] = v
                    out[..., j, i, k] = v
        return out

    def d2metric(self, X) -> np.ndarray:
        """``out[..., i, j, k, l] = d_k d_l g_ij``."""
        X = np.asarray(X, dtype=float)
        return self._fill(self.d2_fns, X, (self.n,) * 4)


def check_spd(g: np.ndarray, points: np.ndarray) -> None:
    """Raise :class:`MetricError` unless every matrix in ``g`` is finite and SPD."""
    g = np.asarray(g, dtype=float)
    flat = g.reshape(-1, g.shape[-2], g.shape[-1])
    pts = np.asarray(points, dtype=float).reshape(-1, g.shape[-1])
    if not np.all(np.isfinite(flat)):
        bad = int(np.argwhere(~np.isfinite(flat).all(axis=(1, 2)))[0, 0])
        raise MetricError(f"metric not finite at point {pts[bad].tolist()}", pts[bad])
    if not np.allclose(flat, np.swapaxes(flat, -1, -2), rtol=1e-10, atol=1e-12):
        raise MetricError("metric not symmetric")
    try:
        np.linalg.cholesky(flat)
        return
    except np.linalg.LinAlgError:
        pass
    # locate the first failing leading minor for the diagnostic
    n = flat.shape[-1]
    for m in range(1, n + 1):
        dets = np.linalg.det(flat[:, :m, :m])
        bad = np.flatnonzero(dets <= 0)
        if bad.size:
            p = pts[bad[0]]
            raise MetricError(
                f"metric not positive definite at point {p.tolist()} (leading minor {m} = {dets[bad[0]]:.6g})",
                p,
                m,
            )
    raise MetricError("metric not positive definite")


def _points(spec, x) -> np.ndarray:
    X = np.asarray(x, dtype=float)
    if X.shape[-1] != spec.dim:
        raise ValueError(f"point has {X.shape[-1]} components, expected {spec.dim}")
    return X


def metric_at(spec, x) -> np.ndarray:
    X = _points(spec, x)
    g = spec.compiled.metric(X)
    check_spd(g, X)
    return g


def inverse_metric_at(spec, x) -> np.ndarray:
    g = metric_at(spec, x)
    ginv = np.linalg.inv(g)
    return 0.5 * (ginv + np.swapaxes(ginv, -1, -2))


def _christoffel(ginv: np.ndarray, dg: np.ndarray) -> np.ndarray:
    # first-kind symbols [l, j, k] = 1/2 (d_j g_lk + d_k g_jl - d_l g_jk)
    first = 0.5 * (
        np.swapaxes(dg, -1, -2)  # [l,k,j] -> d_j g_lk at [l,j,k]
        + np.moveaxis(dg, -3, -2)  # [j,l,k] -> d_k g_jl at [l,j,k]
        - np.moveaxis(dg, -1, -3)  # [j,k,l] -> d_l g_jk at [l,j,k]
    )
    gamma = np.einsum("...il,...ljk->...ijk", ginv, first)
    return 0.5 * (gamma + np.swapaxes(gamma, -1, -2))


def christoffel_at(spec, x) -> np.ndarray:
    """Levi-Civita Christoffel symbols ``gamma[..., i, j, k]``."""
    X = _points(spec, x)
    ginv = inverse_metric_at(spec, X)
    return _christoffel(ginv, spec.compiled.dmetric(X))


def _riemann(spec, X: np.ndarray):
    cm = spec.compiled
    g = cm.metric(X)
    check_spd(g, X)
    ginv = np.linalg.inv(g)
    dg = cm.dmetric(X)
    d2g = cm.d2metric(X)
    T = np.swapaxes(dg, -1, -2) + np.moveaxis(dg, -3, -2) - np.moveaxis(dg, -1, -3)
    # dT[..., l, j, k, m] = d_m T_ljk
    dT = (
        np.swapaxes(d2g, -2, -3)  # [l,k,j,m] -> [l,j,k,m]
        + np.moveaxis(d2g, -4, -3)  # [j,l,k,m] -> [l,j,k,m]
        - np.moveaxis(d2g, -2, -4)  # [j,k,l,m] -> [l,j,k,m]
    )
    dginv = -np.einsum("...ia,...abm,...bl->...ilm", ginv, dg, ginv)
    gamma = 0.5 * np.einsum("...il,...ljk->...ijk", ginv, T)
    dgamma = 0.5 * (
        np.einsum("...ilm,...ljk->...ijkm", dginv, T) + np.einsum("...il,...ljkm->...ijkm", ginv, dT)
    )
    # A[l,i,j,k] = d_i Gamma^l_jk - d_j Gamma^l_ik + Gamma^l_im Gamma^m_jk - Gamma^l_jm Gamma^m_ik
    d_i = np.moveaxis(dgamma, -1, -3)  # [l,j,k,i] -> [l,i,j,k]
    quad = np.einsum("...lim,...mjk->...lijk", gamma, gamma)
    A = d_i - np.swapaxes(d_i, -2, -3) + quad - np.swapaxes(quad, -2, -3)
    return g, ginv, gamma, -A


def riemann_at(spec, x) -> np.ndarray:
    """``R^l_{ijk}`` as ``out[..., l, i, j, k]``."""
    return _riemann(spec, _points(spec, x))[3]


def ricci_at(spec, x) -> np.ndarray:
    return ricci_fields(spec, _points(spec, x), check=True)[1]


def _is_zero(v) -> bool:
    return isinstance(v, float) and v == 0.0


def _mul(a, b):
    if _is_zero(a) or _is_zero(b):
        return 0.0
    return a * b


def _add(a, b):
    if _is_zero(a):
        return b
    if _is_zero(b):
        return a
    return a + b


def _sub(a, b):
    if _is_zero(b):
        return a
    if _is_zero(a):
        return -b
    return a - b


def cholesky_components(A, n):
    """Lower Cholesky factor of a matrix given as nested lists of arrays/floats."""
    L = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1):
            s = A[i][j]
            for k in range(j):
                s = _sub(s, _mul(L[i][k], L[j][k]))
            if i == j:
                if np.any(np.asarray(s) <= 0):
                    raise MetricError("metric not positive definite", minor=i + 1)
                L[i][j] = np.sqrt(s) if not isinstance(s, float) else float(np.sqrt(s))
            elif not _is_zero(s):
                L[i][j] = s / L[j][j]
    return L


def spd_inverse_components(A, n):
    """Inverse of an SPD matrix given as nested lists, through its Cholesky factor."""
    L = cholesky_components(A, n)
    M = [[0.0] * n for _ in range(n)]
    for j in range(n):
        for i in range(j, n):
            s = 1.0 if i == j else 0.0
            for k in range(j, i):
                s = _sub(s, _mul(L[i][k], M[k][j]))
            M[i][j] = 0.0 if _is_zero(s) else s / L[i][i]
    inv = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            s = 0.0
            for k in range(j, n):
                s = _add(s, _mul(M[k][i], M[k][j]))
            inv[i][j] = inv[j][i] = s
    return inv


def _stack(comps, batch) -> np.ndarray:
    n = len(comps)
    out = np.empty((n, n) + batch)
    for i in range(n):
        for j in range(n):
            out[i, j] = comps[i][j]
    return np.moveaxis(out, (0, 1), (-2, -1))


def metric_components(spec, X: np.ndarray):
    cm = spec.compiled
    n = spec.dim
    g = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            g[i][j] = g[j][i] = cm.fns[i][j](X)
    return g


def inverse_metric_fields(spec, X) -> np.ndarray:
    """``g^-1`` at a batch of points through the component-wise Cholesky route."""
    X = np.asarray(X, dtype=float)
    return _stack(spd_inverse_components(metric_components(spec, X), spec.dim), X.shape[:-1])


def contracted_christoffel_components(spec, X: np.ndarray, ginv=None):
    """``w^k = g^ij Gamma^k_ij`` as a list of components.

    Uses ``g^ij Gamma^k_ij = g^kl v_l`` with ``v_l = g^ij (d_i g_lj - 1/2 d_l g_ij)``.
    """
    cm = spec.compiled
    n = spec.dim
    if ginv is None:
        ginv = spd_inverse_components(metric_components(spec, X), n)
    dg = [[[cm.d_fns[a][b][c](X) for c in range(n)] for b in range(n)] for a in range(n)]
    v = []
    for l in range(n):
        acc = 0.0
        for i in range(n):
            for j in range(n):
                t = _sub(dg[l][j][i], _mul(0.5, dg[i][j][l]))
                acc = _add(acc, _mul(ginv[i][j], t))
        v.append(acc)
    w = []
    for k in range(n):
        acc = 0.0
        for l in range(n):
            acc = _add(acc, _mul(ginv[k][l], v[l]))
        w.append(acc)
    return w


def ricci_fields(spec, X: np.ndarray, check: bool = False):
    """Metric and Ricci tensor at a batch of points, without the Riemann tensor.

    Works component by component; coordinate-free components stay Python
    floats and exact zeros are skipped, which makes diagonal or sparse
    metrics cheap. Returns ``(g, ricci)`` with shapes ``(..., n, n)``.
    """
    cm = spec.compiled
    n = spec.dim
    X = np.asarray(X, dtype=float)
    batch = X.shape[:-1]
    g = [[cm.fns[i][j](X) for j in range(n)] for i in range(n)]
    if check:
        check_spd(_stack(g, batch), X)
    ginv = spd_inverse_components(g, n)
    dg = [[[cm.d_fns[a][b][c](X) for c in range(n)] for b in range(n)] for a in range(n)]
    d2 = cm.d2_fns
    d2g = [[[[d2[a][b][c][d](X) for d in range(n)] for c in range(n)] for b in range(n)] for a in range(n)]
    rng = range(n)
    # T[l][j][k] = d_j g_lk + d_k g_jl - d_l g_jk and its derivative in m
    T = [[[_sub(_add(dg[l][k][j], dg[j][l][k]), dg[j][k][l]) for k in rng] for j in rng] for l in rng]
    dT = [
        [[[_sub(_add(d2g[l][k][j][m], d2g[j][l][k][m]), d2g[j][k][l][m]) for m in rng] for k in rng] for j in rng]
        for l in rng
    ]
    # d_m g^il = -g^ia d_m g_ab g^bl
    tmp = [[[0.0] * n for _ in rng] for _ in rng]  # [i][b][m] = g^ia d_m g_ab
    for i in rng:
        for b in rng:
            for m in rng:
                acc = 0.0
                for a in rng:
                    acc = _add(acc, _mul(ginv[i][a], dg[a][b][m]))
                tmp[i][b][m] = acc
    dginv = [[[0.0] * n for _ in rng] for _ in rng]
    for i in rng:
        for l in range(i, n):
            for m in rng:
                acc = 0.0
                for b in rng:
                    acc = _sub(acc, _mul(tmp[i][b][m], ginv[b][l]))
                dginv[i][l][m] = dginv[l][i][m] = acc
    gamma = [[[0.0] * n for _ in rng] for _ in rng]
    dgamma = [[[[0.0] * n for _ in rng] for _ in rng] for _ in rng]  # [i][j][k][m] = d_m Gamma^i_jk
    for i in rng:
        for j in rng:
            for k in range(j, n):
                acc = 0.0
                for l in rng:
                    acc = _add(acc, _mul(ginv[i][l], T[l][j][k]))
                gamma[i][j][k] = gamma[i][k][j] = _mul(0.5, acc)
                for m in rng:
                    acc = 0.0
                    for l in rng:
                        acc = _add(acc, _mul(dginv[i][l][m], T[l][j][k]))
                        acc = _add(acc, _mul(ginv[i][l], dT[l][j][k][m]))
                    dgamma[i][j][k][m] = dgamma[i][k][j][m] = _mul(0.5, acc)
    trace_gamma = [0.0] * n
    for m in rng:
        acc = 0.0
        for k in rng:
            acc = _add(acc, gamma[k][k][m])
        trace_gamma[m] = acc
    # r_ij = d_k Gamma^k_ij - d_i Gamma^k_kj + Gamma^k_km Gamma^m_ij - Gamma^k_im Gamma^m_kj
    ric = [[0.0] * n for _ in rng]
    for i in rng:
        for j in range(i, n):
            acc = 0.0
            for k in rng:
                acc = _add(acc, dgamma[k][i][j][k])
                acc = _sub(acc, dgamma[k][k][j][i])
                acc = _add(acc, _mul(trace_gamma[k], gamma[k][i][j]))
                for m in rng:
                    acc = _sub(acc, _mul(gamma[k][i][m], gamma[m][k][j]))
            ric[i][j] = ric[j][i] = acc
    return _stack(g, batch), _stack(ric, batch)


def g_trace(spec, x, b) -> np.ndarray | float:
    """Trace of a bilinear form with respect to the metric: ``g^ij b_ij``."""
    ginv = inverse_metric_at(spec, x)
    b = np.asarray(b, dtype=float)
    if b.shape[-2:] != ginv.shape[-2:]:
        raise ValueError(f"bilinear form has shape {b.shape[-2:]}, expected {ginv.shape[-2:]}")
    out = np.einsum("...ij,...ij->...", ginv, b)
    return float(out) if np.ndim(out) == 0 else out


def scalar_at(spec, x) -> np.ndarray | float:
    X = _points(spec, x)
    return g_trace(spec, X, ricci_at(spec, X))


def generalized_eigenvalues(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Eigenvalues of ``a`` with respect to SPD ``g`` (roots of det(a - lambda g)).

    Reduces to a standard symmetric problem through ``g = L L^T``.
    Returns ascending eigenvalues with shape ``(..., n)``.
    """
    try:
        L = np.linalg.cholesky(g)
    except np.linalg.LinAlgError as exc:
        raise MetricError(f"cholesky factorization failed: {exc}") from exc
    Linv = np.linalg.inv(L)
    m = Linv @ a @ np.swapaxes(Linv, -1, -2)
    m = 0.5 * (m + np.swapaxes(m, -1, -2))
    return np.linalg.eigvalsh(m)


@dataclass(frozen=True)
class EigenResult:
    point: np.ndarray
    lambdas: np.ndarray


def ricci_eigenvalues_at(spec, x) -> EigenResult:
    X = _points(spec, x)
    g, _, _, R = _riemann(spec, X)
    r = np.einsum("...kikj->...ij", R)
    r = 0.5 * (r + np.swapaxes(r, -1, -2))
    return EigenResult(point=X, lambdas=generalized_eigenvalues(r, g))


@dataclass(frozen=True)
class CurvatureAt:
    point: np.ndarray
    g: np.ndarray
    g_inv: np.ndarray
    gamma: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray
    scalar: np.ndarray | float

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        return generalized_eigenvalues(self.ricci, self.g)


def curvature_at(spec, x) -> CurvatureAt:
    """Every curvature quantity at ``x`` (single point or batch) in one pass."""
    X = _points(spec, x)
    g, ginv, gamma, R = _riemann(spec, X)
    ginv = 0.5 * (ginv + np.swapaxes(ginv, -1, -2))
    r = np.einsum("...kikj->...ij", R)
    r = 0.5 * (r + np.swapaxes(r, -1, -2))
    s = np.einsum("...ij,...ij->...", ginv, r)
    return CurvatureAt(
        point=X,
        g=g,
        g_inv=ginv,
        gamma=0.5 * (gamma + np.swapaxes(gamma, -1, -2)),
        riemann=R,
        ricci=r,
        scalar=float(s) if np.ndim(s) == 0 else s,
    )


class ScalarField:
    """A compiled function with its gradient and coordinate Hessian."""

    def __init__(self, spec, f: Expr):
        n = spec.dim
        params = spec.params
        self.expr = f
        self.n = n
        self.value_fn = compile_expr(f, params)
        d = [differentiate(f, i) for i in range(n)]
        self.grad_fns = [compile_expr(e, params) for e in d]
        self.hess_fns = [[compile_expr(differentiate(d[i], j), params) for j in range(n)] for i in range(n)]

    def value(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return _broadcast(self.value_fn(X), X.shape[:-1]).copy()

    def grad(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.stack([_broadcast(fn(X), X.shape[:-1]) for fn in self.grad_fns], axis=-1)

    def second(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.stack(
            [np.stack([_broadcast(fn(X), X.shape[:-1]) for fn in row], axis=-1) for row in self.hess_fns],
            axis=-2,
        )


def _hessian(spec, field: ScalarField, X: np.ndarray) -> np.ndarray:
    gamma = christoffel_at(spec, X)
    H = field.second(X) - np.einsum("...kij,...k->...ij", gamma, field.grad(X))
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def hessian_at(spec, f: Expr, x) -> np.ndarray:
    """Covariant Hessian ``d_i d_j f - Gamma^k_ij d_k f``."""
    X = _points(spec, x)
    return _hessian(spec, ScalarField(spec, f), X)


def laplace_beltrami_at(spec, f: Expr, x) -> np.ndarray | float:
    """Laplace-Beltrami operator: metric trace of the Hessian."""
    X = _points(spec, x)
    return g_trace(spec, X, hessian_at(spec, f, X))


def laplacian_values(spec, field: ScalarField, X: np.ndarray) -> np.ndarray:
    """Batched Laplace-Beltrami of a precompiled field: ``g^ij d_ij f - w^k d_k f``."""
    X = np.asarray(X, dtype=float)
    n = spec.dim
    ginv = spd_inverse_components(metric_components(spec, X), n)
    w = contracted_christoffel_components(spec, X, ginv)
    acc = 0.0
    for i in range(n):
        for j in range(n):
            acc = _add(acc, _mul(ginv[i][j], field.hess_fns[i][j](X)))
        acc = _sub(acc, _mul(w[i], field.grad_fns[i](X)))
    return _broadcast(acc, X.shape[:-1]).copy()
