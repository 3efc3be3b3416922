"""Einstein-metric classification.

The pipeline checks that the scalar curvature is constant (value ``c``),
that every Ricci eigenvalue relative to ``g`` is at least ``s/n``, and that
``r - (s/n) g`` vanishes pointwise. As corroborating evidence it integrates
the deviation form ``r - (c/n) g`` along simulated Brownian paths: for a
constant-scalar metric the trace of that form is zero, so its bracket
integral tends to zero as the step shrinks, whether or not the metric is
Einstein.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, NamedTuple

import numpy as np

from .geometry import curvature_at, generalized_eigenvalues
from .sampling import sample_domain
from .stochastic import (
    BilinearFormField,
    MeanStderr,
    Paths,
    integrate_bilinear,
    mean_stderr,
    simulate_ensemble,
)

EINSTEIN = "Einstein"
RICCI_FLAT = "Ricci-flat"
NOT_EINSTEIN = "NotEinstein"
INDETERMINATE = "Indeterminate"


class HypothesisViolation(ValueError):
    """The bilinear form has a negative eigenvalue, so positivity does not apply."""


class ScalarConstancy(NamedTuple):
    is_constant: bool
    c: float
    spread: float
    relative_spread: float


def default_samples(spec, count: int = 200) -> np.ndarray:
    return sample_domain(spec, count)


def scalar_constancy(spec, samples, tol: float = 1e-6) -> ScalarConstancy:
    """Is the scalar curvature constant over ``samples``?

    ``c`` is the sample mean; constancy means ``max - min <= tol * max(1, |c|)``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(X) < 2:
        raise ValueError("scalar_constancy needs at least 2 sample points")
    s = np.atleast_1d(curvature_at(spec, X).scalar)
    c = float(np.mean(s))
    spread = float(np.max(s) - np.min(s))
    scale = max(1.0, abs(c))
    return ScalarConstancy(spread <= tol * scale, c, spread, spread / scale)


def eigenvalue_gap(spec, samples) -> float:
    """Minimum over samples and indices of ``lambda_i(x) - s(x)/n``."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    curv = curvature_at(spec, X)
    lam = curv.eigenvalues
    s = np.atleast_1d(curv.scalar)
    return float(np.min(lam - s[:, None] / spec.dim))


def deviation_form(spec, c: float) -> BilinearFormField:
    """The field ``r - (c/n) g``."""
    form = BilinearFormField.ricci(spec) - (c / spec.dim) * BilinearFormField.metric(spec)
    form.label = f"ricci - {c / spec.dim:g}*g"
    return form


def deviation_values(spec, paths: Paths, c: float):
    """Per-path bracket integrals of the deviation form."""
    return integrate_bilinear(spec, deviation_form(spec, c), paths)


def deviation_integral(spec, paths: Paths, c: float) -> MeanStderr:
    return mean_stderr(np.atleast_1d(deviation_values(spec, paths, c)))


@dataclass
class PositivityReport:
    min_integral: float
    max_integral: float
    n_paths: int
    n_above_tol: int
    min_sampled_eigenvalue: float
    strictly_positive_sampled: bool
    verdict: str

    @property
    def witnessed(self) -> bool:
        return self.n_above_tol > 0


def positivity_check(spec, b: BilinearFormField, paths: Paths, tol: float = 1e-6, samples=None) -> PositivityReport:
    """Witness ``b != 0`` through a positive bracket integral.

    Requires every sampled eigenvalue of ``b`` (relative to ``g``) to be at
    least ``-tol``; raises :class:`HypothesisViolation` otherwise.
    """
    X = default_samples(spec) if samples is None else np.atleast_2d(np.asarray(samples, dtype=float))
    lam = generalized_eigenvalues(b(X), spec.compiled.metric(X))
    lam_min = float(np.min(lam))
    if lam_min < -tol:
        raise HypothesisViolation(f"sampled eigenvalue {lam_min:.6g} < 0: form is not positive semidefinite")
    values = np.atleast_1d(integrate_bilinear(spec, b, paths))
    above = int(np.sum(values > tol))
    verdict = "b != 0 witnessed" if above else "consistent with b = 0"
    return PositivityReport(
        min_integral=float(values.min()),
        max_integral=float(values.max()),
        n_paths=int(values.size),
        n_above_tol=above,
        min_sampled_eigenvalue=lam_min,
        strictly_positive_sampled=lam_min > tol,
        verdict=verdict,
    )


@dataclass(frozen=True)
class ClassifyConfig:
    samples: int = 200
    paths: int = 256
    dt: float = 1e-3
    T: float = 1.0
    tol: float = 1e-6
    seed: int = 0
    x0: tuple[float, ...] | None = None


@dataclass
class ClassificationReport:
    spec_name: str
    dim: int
    sample_count: int
    scalar_constant: bool | None = None
    scalar_constant_value: float | None = None
    scalar_spread: float | None = None
    scalar_relative_spread: float | None = None
    eigenvalue_gap: float | None = None
    pointwise_einstein_residual: float | None = None
    deviation_stats: dict[str, Any] | None = None
    positivity: dict[str, Any] | None = None
    verdict: str = INDETERMINATE
    einstein_constant: float | None = None
    reason: str | None = None
    diagnostics: list[str] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def verdict_string(self) -> str:
        if self.verdict in (EINSTEIN, RICCI_FLAT):
            return f"{self.verdict}(lambda={self.einstein_constant:.6g})"
        return f"{self.verdict}({self.reason})"

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["verdict_string"] = self.verdict_string
        return d


def classify(spec, config: ClassifyConfig | None = None) -> ClassificationReport:
    """Classify ``spec`` as Einstein, Ricci-flat or not Einstein."""
    cfg = config or ClassifyConfig()
    report = ClassificationReport(
        spec_name=spec.name,
        dim=spec.dim,
        sample_count=cfg.samples,
        config={k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
    )
    report.diagnostics.append("constant scalar curvature is checked as an explicit hypothesis")
    tol = cfg.tol
    n = spec.dim
    try:
        samples = default_samples(spec, cfg.samples)
        sc = scalar_constancy(spec, samples, tol)
        report.scalar_constant = sc.is_constant
        report.scalar_constant_value = sc.c
        report.scalar_spread = sc.spread
        report.scalar_relative_spread = sc.relative_spread

        curv = curvature_at(spec, samples)
        s = np.atleast_1d(curv.scalar)
        lam = curv.eigenvalues
        gap = float(np.min(lam - s[:, None] / n))
        report.eigenvalue_gap = gap
        resid = curv.ricci - (s / n)[:, None, None] * curv.g
        report.pointwise_einstein_residual = float(np.max(np.abs(resid)))

        if not sc.is_constant:
            report.verdict = NOT_EINSTEIN
            report.reason = "non-constant scalar"
            report.diagnostics.append(f"scalar curvature spread {sc.spread:.6g} exceeds tolerance; stochastic stage skipped")
            return report

        c = sc.c
        scale = max(1.0, abs(c) / n)
        ens = simulate_ensemble(spec, cfg.x0, cfg.T, cfg.dt, cfg.seed, cfg.paths)
        values = np.atleast_1d(deviation_values(spec, ens, c))
        stats = mean_stderr(values)
        report.deviation_stats = {
            "c": c,
            "mean": stats.mean,
            "stderr": stats.stderr,
            "rms": float(np.sqrt(np.mean(values**2))),
            "max_abs": float(np.max(np.abs(values))),
            "n_paths": stats.n,
            "dt": cfg.dt,
            "T": cfg.T,
            "consistent_with_zero": bool(abs(stats.mean) <= 3 * stats.stderr or abs(stats.mean) <= tol),
        }

        if gap < -tol * scale:
            report.verdict = NOT_EINSTEIN
            report.reason = f"eigenvalue gap {gap:.3f} < 0"
            return report

        form = deviation_form(spec, c)
        try:
            pos = positivity_check(spec, form, ens, tol=max(tol, 10 * tol * scale), samples=samples)
            report.positivity = asdict(pos)
        except HypothesisViolation as exc:
            report.diagnostics.append(f"positivity check not applicable: {exc}")

        if report.pointwise_einstein_residual > tol * scale:
            report.verdict = NOT_EINSTEIN
            report.reason = f"pointwise residual {report.pointwise_einstein_residual:.3g} exceeds tolerance"
            return report

        report.einstein_constant = c / n
        if abs(c) <= tol:
            report.verdict = RICCI_FLAT
        else:
            report.verdict = EINSTEIN
        if not report.deviation_stats["consistent_with_zero"]:
            report.diagnostics.append("deviation integral mean is not within 3 standard errors of zero")
        return report
    except Exception as exc:  # any stage failure makes the verdict indeterminate
        report.verdict = INDETERMINATE
        report.reason = f"{type(exc).__name__}: {exc}"
        report.diagnostics.append(report.reason)
        return report
