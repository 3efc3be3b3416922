import math

import numpy as np
import pytest

from einsteinprobe.expr import parse_expr
from einsteinprobe.geometry import inverse_metric_at, metric_at
from einsteinprobe.stochastic import (
    BilinearFormField,
    Path,
    drift_at,
    integrate_bilinear,
    integrate_trace,
    lemma_residual,
    martingale_defect,
    mean_stderr,
    predicted_residual_std,
    quadratic_variation,
    quadratic_variation_increments,
    simulate_batch,
    simulate_bm,
    simulate_ensemble,
    time_grid,
)
from conftest import interior_points


@pytest.fixture(scope="module")
def flat_paths(euclid):
    return simulate_batch(euclid, [0.0, 0.0], 1.0, 1e-4, 3, range(200))


def test_time_grid():
    t = time_grid(1.0, 1e-3)
    assert len(t) == 1001 and t[0] == 0.0 and t[-1] == 1.0
    assert len(time_grid(0.3, 1e-4)) == 3001
    t = time_grid(1.0, 0.3)  # last step shortened to land on T
    assert t[-1] == 1.0 and len(t) == 5
    for bad in ((1.0, 0.0), (1.0, -1e-3), (1e-3, 1e-2)):
        with pytest.raises(ValueError):
            time_grid(*bad)


def test_simulate_rejects_bad_start(sphere):
    with pytest.raises(ValueError, match="outside"):
        simulate_bm(sphere, [0.1, 1.0], 1.0, 1e-3, 0)
    with pytest.raises(ValueError):
        simulate_bm(sphere, [1.0, 1.0, 1.0], 1.0, 1e-3, 0)


def test_drift_matches_christoffel_contraction(catalog):
    # drift used by the stepper vs -1/2 g^ij Gamma^k_ij from the reference form
    from einsteinprobe.stochastic import _StepCoefficients
    from oracles import fd_christoffel

    for spec in catalog.values():
        X = interior_points(spec, 10, seed=4)
        drift, sigma = _StepCoefficients(spec)(X)
        drift = np.stack([np.broadcast_to(d, (len(X),)) for d in drift], axis=-1)
        np.testing.assert_allclose(drift, drift_at(spec, X), atol=1e-10)
        for k, x in enumerate(X):
            ref = -0.5 * np.einsum("ij,kij->k", inverse_metric_at(spec, x), fd_christoffel(spec, x))
            np.testing.assert_allclose(drift[k], ref, atol=1e-5)
            S = np.array([[np.broadcast_to(sigma[i][j], (len(X),))[k] if j <= i else 0.0 for j in range(spec.dim)] for i in range(spec.dim)])
            np.testing.assert_allclose(S @ S.T, inverse_metric_at(spec, x), atol=1e-12)


def test_sphere_drift_closed_form(sphere):
    theta = 1.1
    np.testing.assert_allclose(drift_at(sphere, [theta, 2.0]), [0.5 / math.tan(theta), 0.0], atol=1e-14)


def test_euclidean_increments_are_the_noise(euclid):
    p = simulate_bm(euclid, [0.5, -0.5], 0.5, 1e-3, 11)
    np.testing.assert_array_equal(p.states[1:], p.states[:-1] + p.dW)
    assert p.n_steps == 500 and p.exit_time == 0.5 and not p.exited


def test_euclidean_moments(euclid):
    ens = simulate_ensemble(euclid, [0.0, 0.0], 1.0, 1e-2, 2024, 10_000)
    end = ens.map(lambda b: b.states[-1])
    assert not np.any(ens.map(lambda b: b.n_steps < 100))  # box [-5,5]^2: exits are rare but allowed
    for i in range(2):
        m = mean_stderr(end[:, i])
        assert abs(m.mean) <= 3 * m.stderr
    sq = mean_stderr(np.sum(end**2, axis=1))
    assert abs(sq.mean - 2.0) <= 3 * sq.stderr


def test_sphere_stopping_contract(sphere):
    batch = simulate_batch(sphere, [0.5, 3.0], 2.0, 1e-3, 5, range(300))
    assert np.any(batch.n_steps < 2000), "expected some exits near the theta boundary"
    lo, hi = np.array(sphere.lower), np.array(sphere.upper)
    for p in batch:
        assert p.exit_time <= p.T
        assert np.all(p.states >= lo) and np.all(p.states <= hi)
        assert p.times[-1] == p.exit_time
        assert len(p.states) == p.n_steps + 1 == len(p.dW) + 1
    # frozen tail after exit
    k = int(batch.n_steps.min())
    p = int(batch.n_steps.argmin())
    assert np.all(batch.states[k:, p] == batch.states[k, p])
    assert not np.any(batch.dW[k:, p])


def test_determinism_and_batch_independence(s2s1):
    x0 = s2s1.center
    a = simulate_bm(s2s1, x0, 0.3, 1e-3, 99, index=7)
    b = simulate_bm(s2s1, x0, 0.3, 1e-3, 99, index=7)
    batch = simulate_batch(s2s1, x0, 0.3, 1e-3, 99, range(3, 12))
    c = batch.path(4)
    for other in (b, c):
        assert np.array_equal(a.states, other.states)
        assert np.array_equal(a.dW, other.dW)
        assert a.exit_time == other.exit_time
    d = simulate_bm(s2s1, x0, 0.3, 1e-3, 100, index=7)
    assert not np.array_equal(a.states, d.states)


def test_ensemble_independent_of_threads(s2s1):
    ens = simulate_ensemble(s2s1, None, 0.2, 1e-3, 8, 600, batch_size=128)
    form = BilinearFormField.ricci(s2s1)
    one = ens.map(lambda b: b.states[-1], threads=1)
    many = ens.map(lambda b: b.states[-1], threads=8)
    assert np.array_equal(one, many)
    assert np.array_equal(integrate_bilinear(s2s1, form, ens), integrate_bilinear(s2s1, form, ens))


def test_qv_euclidean(flat_paths):
    qv = quadratic_variation(flat_paths)
    tr = np.trace(qv, axis1=1, axis2=2)
    assert np.all(np.abs(tr - 2.0) <= 0.1)
    off = mean_stderr(qv[:, 0, 1])
    assert abs(off.mean) <= 3 * off.stderr
    inc = quadratic_variation_increments(flat_paths.path(0))
    assert inc.shape == (10_000, 2, 2)
    np.testing.assert_array_equal(inc, np.swapaxes(inc, 1, 2))
    assert np.all(np.linalg.eigvalsh(inc) >= -1e-18)
    np.testing.assert_allclose(inc.sum(axis=0), qv[0], rtol=1e-12)


def test_qv_off_diagonal_thousand_paths(euclid):
    qv = quadratic_variation(simulate_ensemble(euclid, None, 1.0, 1e-3, 17, 1000))
    off = mean_stderr(qv[:, 0, 1])
    assert abs(off.mean) <= 3 * off.stderr


def test_qv_approximates_inverse_metric_integral(sphere):
    # sum dX dX^T ~ int g^-1 dt along the path
    batch = simulate_batch(sphere, [1.5, 3.0], 0.5, 1e-4, 1, range(40))
    qv = quadratic_variation(batch)
    mask = batch.active_mask()
    ginv = inverse_metric_at(sphere, batch.states[:-1].reshape(-1, 2)).reshape(len(mask), len(batch), 2, 2)
    ref = np.einsum("kpij,kp->pij", ginv, mask * batch.step_sizes[:, None])
    assert np.median(np.abs(qv - ref)) < 0.02


def test_constant_path_has_zero_qv(euclid):
    n = 10
    p = Path(euclid, 1.0, 0.1, np.linspace(0, 1, n + 1), np.zeros((n + 1, 2)), np.zeros((n, 2)), 1.0, 0)
    assert not np.any(quadratic_variation_increments(p))
    assert not np.any(quadratic_variation(p))
    assert integrate_bilinear(euclid, BilinearFormField.metric(euclid), p) == 0.0


def test_integrate_bilinear_metric_euclidean(euclid, flat_paths):
    v = integrate_bilinear(euclid, BilinearFormField.metric(euclid), flat_paths)
    assert np.all(np.abs(v - 2.0) <= 0.05 * 2.0)
    m = mean_stderr(v)
    assert abs(m.mean - 2.0) <= 3 * m.stderr
    assert np.all(v > 0.5)


def test_zero_form_integrals_are_exactly_zero(catalog):
    for spec in catalog.values():
        batch = simulate_batch(spec, spec.center, 0.1, 1e-3, 0, range(5))
        zero = BilinearFormField.zero(spec)
        assert not np.any(integrate_bilinear(spec, zero, batch))
        assert not np.any(integrate_trace(spec, zero, batch))
        assert not np.any(lemma_residual(spec, zero, batch).residual)


def test_integrate_trace_of_metric_is_n_zeta(catalog):
    for spec in catalog.values():
        batch = simulate_batch(spec, spec.center, 1.0, 1e-3, 2, range(20))
        v = integrate_trace(spec, BilinearFormField.metric(spec), batch)
        np.testing.assert_allclose(v, spec.dim * batch.exit_times, rtol=1e-12)
        full = batch.exit_times == 1.0
        np.testing.assert_allclose(v[full], spec.dim * 1.0, rtol=1e-12)


def test_ricci_on_sphere_matches_scalar_times_duration(sphere):
    batch = simulate_batch(sphere, sphere.center, 0.5, 1e-4, 6, range(100))
    ric = BilinearFormField.ricci(sphere)
    tr = integrate_trace(sphere, ric, batch)
    np.testing.assert_allclose(tr, 2.0 * batch.exit_times, rtol=1e-8)
    bi = integrate_bilinear(sphere, ric, batch)
    # r = g on the unit sphere, so the bracket integral is the metric one
    np.testing.assert_allclose(bi, integrate_bilinear(sphere, BilinearFormField.metric(sphere), batch), rtol=1e-8)
    assert np.mean(np.abs(bi - tr) <= 0.15) >= 0.95


def test_trace_of_deviation_on_product_is_zero(s2s1):
    from einsteinprobe.einstein import deviation_form

    batch = simulate_batch(s2s1, s2s1.center, 1.0, 1e-3, 4, range(50))
    v = integrate_trace(s2s1, deviation_form(s2s1, 2.0), batch)
    assert np.max(np.abs(v)) <= 1e-10


def test_lemma_residual_band(euclid, flat_paths):
    res = lemma_residual(euclid, BilinearFormField.metric(euclid), flat_paths)
    np.testing.assert_allclose(res.residual, res.bilinear - res.trace, rtol=0, atol=1e-15)
    assert np.mean(np.abs(res.residual) <= 0.15) >= 0.95
    one = lemma_residual(euclid, BilinearFormField.metric(euclid), flat_paths.path(0))
    assert one.residual == pytest.approx(res.residual[0], abs=1e-15)
    # leading-order prediction sqrt(2 n dt T) = sqrt(4e-4)
    pred = predicted_residual_std(euclid, BilinearFormField.metric(euclid), flat_paths)
    np.testing.assert_allclose(pred, math.sqrt(4e-4), rtol=1e-9)


def test_lemma_residual_shrinks_with_dt(euclid):
    b = BilinearFormField.metric(euclid)
    rms = {}
    for dt in (1e-3, 1e-4):
        r = lemma_residual(euclid, b, simulate_ensemble(euclid, None, 1.0, dt, 12, 1000)).residual
        rms[dt] = float(np.sqrt(np.mean(r**2)))
    ratio = rms[1e-3] / rms[1e-4]
    # expected sqrt(10); 1000 paths give about 2.2% relative error on each RMS
    assert 1.2 <= ratio <= math.sqrt(10) * (1 + 4 * 0.032)


def test_integrate_bilinear_linearity():
    from einsteinprobe.manifold import builtin_spec

    spec = builtin_spec("bumpy_sphere2")
    batch = simulate_batch(spec, spec.center, 0.5, 1e-3, 1, range(20))
    c = spec.coords
    b1 = BilinearFormField.from_exprs(spec, [[parse_expr("1 + sin(phi)^2", c), parse_expr("theta", c)], [parse_expr("theta", c), parse_expr("2", c)]])
    b2 = BilinearFormField.ricci(spec)
    for alpha in (-2.5, 0.0, 0.3, 7.0):
        lhs = integrate_bilinear(spec, alpha * b1 + b2, batch)
        rhs = alpha * integrate_bilinear(spec, b1, batch) + integrate_bilinear(spec, b2, batch)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-13)
        lt = integrate_trace(spec, alpha * b1 + b2, batch)
        np.testing.assert_allclose(lt, alpha * integrate_trace(spec, b1, batch) + integrate_trace(spec, b2, batch), rtol=1e-12, atol=1e-13)


def test_positivity_of_psd_forms(catalog):
    for spec in catalog.values():
        batch = simulate_batch(spec, spec.center, 0.2, 1e-3, 9, range(30))
        g = BilinearFormField.metric(spec)
        v = integrate_bilinear(spec, g, batch)
        assert np.all(v[batch.n_steps >= 1] > 0)
        # rank-one PSD form built from the first coordinate
        e = BilinearFormField(spec, lambda X, n=spec.dim: np.broadcast_to(np.eye(n)[0][:, None] * np.eye(n)[0][None, :], np.shape(X)[:-1] + (n, n)), "e1e1")
        assert np.all(integrate_bilinear(spec, e, batch) >= 0)


def test_bilinear_fields_symmetric(catalog):
    for spec in catalog.values():
        X = interior_points(spec, 20)
        for b in (BilinearFormField.metric(spec), BilinearFormField.ricci(spec), BilinearFormField.ricci(spec) + 0.5 * BilinearFormField.metric(spec)):
            B = b(X)
            np.testing.assert_allclose(B, np.swapaxes(B, -1, -2), atol=1e-12)
        np.testing.assert_array_equal(BilinearFormField.metric(spec)(X), metric_at(spec, X))


def test_from_exprs_rejects_asymmetric(euclid):
    c = euclid.coords
    with pytest.raises(ValueError):
        BilinearFormField.from_exprs(euclid, [[parse_expr("1", c), parse_expr("x1", c)], [parse_expr("x2", c), parse_expr("1", c)]])


def test_martingale_defect_examples(euclid, sphere):
    ens = simulate_ensemble(euclid, None, 1.0, 1e-3, 5, 500)
    const = martingale_defect(euclid, parse_expr("3.5", euclid.coords), ens)
    assert const.mean == 0.0 and const.stderr == 0.0
    m = martingale_defect(euclid, parse_expr("x1", euclid.coords), ens)
    assert abs(m.mean) <= 3 * m.stderr and m.n == 500
    ens = simulate_ensemble(sphere, None, 0.3, 1e-3, 5, 2000)
    m = martingale_defect(sphere, parse_expr("cos(theta)", sphere.coords), ens)
    assert abs(m.mean) <= 3 * m.stderr
    with pytest.raises(ValueError):
        martingale_defect(sphere, parse_expr("cos(theta)", sphere.coords), [])


def test_martingale_defect_detects_wrong_generator(sphere):
    # compensating cos(theta) with its flat second derivative (-cos) instead of
    # the Laplace-Beltrami value (-2 cos) leaves a visible drift
    ens = simulate_ensemble(sphere, [0.8, 3.0], 0.3, 1e-3, 5, 4000)
    f = parse_expr("cos(theta)", sphere.coords)

    def flat(batch):
        h = batch.step_sizes[:, None] * batch.active_mask()
        theta = batch.states[:, :, 0]
        end = theta[batch.n_steps, np.arange(len(batch))]
        return np.cos(end) - np.cos(theta[0]) + 0.5 * np.sum(np.cos(theta[:-1]) * h, axis=0)

    good = martingale_defect(sphere, f, ens)
    bad = mean_stderr(ens.map(flat))
    assert abs(good.mean) <= 3 * good.stderr
    assert abs(bad.mean) > 10 * bad.stderr
