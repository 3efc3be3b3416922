"""Command-line interface: validate | curvature | simulate | verify | classify.

Exit codes: 0 success, 1 spec or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from contextlib import contextmanager
from typing import Any, Iterator

import numpy as np

from .einstein import ClassifyConfig, classify, default_samples, deviation_form, scalar_constancy
from .expr import Coord, ExprError
from .geometry import MetricError, curvature_at
from .manifold import SpecError, load_spec, validate_spec
from .stochastic import (
    BilinearFormField,
    PathBatch,
    _bilinear_batch,
    _gtrace_batch,
    compensated_values,
    mean_stderr,
    predicted_residual_std,
    simulate_bm,
    simulate_ensemble,
)

EXIT_OK = 0
EXIT_SPEC = 1
EXIT_USAGE = 2

# residual bands: the larger of a fixed band and this many predicted standard deviations
LEMMA_BAND = 0.15
DEVIATION_BAND = 0.2
BAND_SIGMAS = 4.0
COVERAGE = 0.95


class _SpecFailure(Exception):
    pass


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _dump_json(payload: Any) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True, allow_nan=False) + "\n"


@contextmanager
def _writer(dest: str) -> Iterator[io.TextIOBase]:
    if dest == "-":
        yield sys.stdout
        sys.stdout.flush()
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _emit(dest: str, text: str) -> None:
    with _writer(dest) as fh:
        fh.write(text)


def _error(exc: BaseException) -> int:
    payload: dict[str, Any] = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("point", "minor", "position", "token"):
        v = getattr(exc, attr, None)
        if v is not None:
            payload[attr] = v
    sys.stderr.write(_dump_json(payload))
    return EXIT_SPEC


def _load(args) -> Any:
    spec = load_spec(args.spec)
    if args.param:
        overrides = {}
        for item in args.param:
            key, _, val = item.partition("=")
            try:
                overrides[key] = float(val)
            except ValueError:
                raise SpecError(f"bad --param {item!r}; expected NAME=VALUE") from None
        spec = spec.with_params(**overrides)
        validate_spec(spec)
    return spec


def _x0(args, spec) -> np.ndarray:
    if getattr(args, "x0", None) is None:
        return spec.center
    x0 = np.array(args.x0, dtype=float)
    if x0.shape != (spec.dim,):
        raise SpecError(f"--x0 needs {spec.dim} values")
    if not spec.contains(x0):
        raise SpecError(f"--x0 {x0.tolist()} lies outside the domain box")
    return x0


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    spec = _load(args)
    validate_spec(spec, count=args.samples)
    _emit(
        args.out,
        _dump_json(
            {
                "status": "ok",
                "name": spec.name,
                "dim": spec.dim,
                "coords": list(spec.coords),
                "params": dict(spec.params),
                "domain": [list(iv) for iv in spec.domain],
                "validation_samples": args.samples,
            }
        ),
    )
    return EXIT_OK


def cmd_curvature(args) -> int:
    spec = _load(args)
    X = default_samples(spec, args.samples)
    curv = curvature_at(spec, X)
    scalars = np.atleast_1d(curv.scalar)
    eig = curv.eigenvalues
    n = spec.dim
    if args.format == "csv":
        header = (
            [f"x{i + 1}" for i in range(n)]
            + [f"g{i + 1}{j + 1}" for i in range(n) for j in range(n)]
            + [f"ricci{i + 1}{j + 1}" for i in range(n) for j in range(n)]
            + ["scalar"]
            + [f"lambda{i + 1}" for i in range(n)]
        )
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(header)
        for k in range(len(X)):
            w.writerow(
                [repr(float(v)) for v in X[k]]
                + [repr(float(v)) for v in curv.g[k].ravel()]
                + [repr(float(v)) for v in curv.ricci[k].ravel()]
                + [repr(float(scalars[k]))]
                + [repr(float(v)) for v in eig[k]]
            )
        _emit(args.out, buf.getvalue())
        return EXIT_OK
    rows = [
        {
            "point": X[k],
            "g": curv.g[k],
            "ricci": curv.ricci[k],
            "scalar": float(scalars[k]),
            "eigenvalues": eig[k],
        }
        for k in range(len(X))
    ]
    _emit(args.out, _dump_json({"spec": spec.name, "coords": list(spec.coords), "samples": len(X), "rows": rows}))
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = _load(args)
    x0 = _x0(args, spec)
    ens = simulate_ensemble(spec, x0, args.T, args.dt, args.seed, args.paths)
    n = spec.dim
    if args.format == "json":
        def summary(batch: PathBatch):
            P = len(batch)
            end = batch.states[batch.n_steps, np.arange(P)]
            dX = np.diff(batch.states, axis=0)
            qv = np.einsum("kpi,kpi->p", dX, dX)
            return np.column_stack([batch.exit_times, end, qv])

        data = ens.map(summary)
        exit_times = data[:, 0]
        payload = {
            "spec": spec.name,
            "x0": x0,
            "T": args.T,
            "dt": args.dt,
            "seed": args.seed,
            "n_paths": args.paths,
            "exit_fraction": float(np.mean(exit_times < args.T)),
            "exit_time_mean": float(np.mean(exit_times)),
            "final_state_mean": np.mean(data[:, 1 : 1 + n], axis=0),
            "qv_trace_mean": float(np.mean(data[:, 1 + n])),
        }
        _emit(args.out, _dump_json(payload))
        return EXIT_OK

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    multi = args.paths > 1
    w.writerow((["path"] if multi else []) + ["t"] + [f"x{i + 1}" for i in range(n)])
    for p in range(args.paths):
        path = simulate_bm(spec, x0, args.T, args.dt, args.seed, index=p)
        for t, x in zip(path.times, path.states):
            w.writerow(([str(p)] if multi else []) + [repr(float(t))] + [repr(float(v)) for v in x])
    _emit(args.out, buf.getvalue())
    return EXIT_OK


def _band_check(name: str, values: np.ndarray, predicted: np.ndarray, base: float, **extra) -> dict:
    band = np.maximum(base, BAND_SIGMAS * predicted)
    within = float(np.mean(np.abs(values) <= band))
    return {
        "name": name,
        "statistic": within,
        "threshold": COVERAGE,
        "pass": bool(within >= COVERAGE),
        "details": {
            "rms": float(np.sqrt(np.mean(values**2))),
            "max_abs": float(np.max(np.abs(values))),
            "band_min": float(np.min(band)),
            "band_max": float(np.max(band)),
            **extra,
        },
    }


def cmd_verify(args) -> int:
    spec = _load(args)
    n = spec.dim
    samples = default_samples(spec, args.samples)
    curv = curvature_at(spec, samples)
    scalars = np.atleast_1d(curv.scalar)
    checks: list[dict] = []

    tr_g = np.einsum("kij,kij->k", curv.g_inv, curv.g)
    err = float(np.max(np.abs(tr_g - n)))
    checks.append({"name": "metric_trace_equals_dim", "statistic": err, "threshold": 1e-12 * n, "pass": err <= 1e-12 * n})

    eig_err = float(np.max(np.abs(curv.eigenvalues.sum(axis=-1) - scalars) / np.maximum(1.0, np.abs(scalars))))
    checks.append({"name": "eigenvalue_sum_equals_scalar", "statistic": eig_err, "threshold": 1e-8, "pass": eig_err <= 1e-8})

    sc = scalar_constancy(spec, samples, args.tol)
    checks.append(
        {
            "name": "scalar_constancy",
            "statistic": sc.relative_spread,
            "threshold": args.tol,
            "pass": sc.is_constant,
            "details": {"c": sc.c, "spread": sc.spread},
        }
    )

    metric = BilinearFormField.metric(spec)
    ricci = BilinearFormField.ricci(spec)
    dev = deviation_form(spec, sc.c) if sc.is_constant else None
    f = Coord(0, spec.coords[0])

    def per_batch(batch: PathBatch) -> np.ndarray:
        bi_g = _bilinear_batch(metric, batch)
        res_g = bi_g - _gtrace_batch(metric, batch)
        pred_g = predicted_residual_std(spec, metric, batch)
        res_r = _bilinear_batch(ricci, batch) - _gtrace_batch(ricci, batch)
        pred_r = predicted_residual_std(spec, ricci, batch)
        mart = compensated_values(spec, f, batch)
        if dev is not None:
            dv = _bilinear_batch(dev, batch)
            pred_d = predicted_residual_std(spec, dev, batch)
        else:
            dv = pred_d = np.full(len(batch), np.nan)
        return np.column_stack([bi_g, res_g, pred_g, res_r, pred_r, mart, dv, pred_d, batch.exit_times])

    ens = simulate_ensemble(spec, _x0(args, spec), args.T, args.dt, args.seed, args.paths)
    data = ens.map(per_batch)
    bi_g, res_g, pred_g, res_r, pred_r, mart, dv, pred_d, exits = data.T

    checks.append(_band_check("lemma_residual_metric", res_g, pred_g, LEMMA_BAND))
    checks.append(_band_check("lemma_residual_ricci", res_r, pred_r, LEMMA_BAND))
    ms = mean_stderr(mart)
    checks.append(
        {
            "name": "martingale_defect_first_coordinate",
            "statistic": abs(ms.mean),
            "threshold": 3 * ms.stderr,
            "pass": bool(abs(ms.mean) <= 3 * ms.stderr),
            "details": {"mean": ms.mean, "stderr": ms.stderr},
        }
    )
    checks.append(
        {
            "name": "positivity_metric_integral",
            "statistic": float(np.min(bi_g)),
            "threshold": 0.0,
            "pass": bool(np.min(bi_g) > 0),
        }
    )
    if dev is not None:
        checks.append(_band_check("deviation_integral", dv, pred_d, DEVIATION_BAND, c=sc.c))
    else:
        checks.append(
            {
                "name": "deviation_integral",
                "statistic": None,
                "threshold": COVERAGE,
                "pass": None,
                "details": {"skipped": "scalar curvature not constant"},
            }
        )

    report = {
        "spec": spec.name,
        "config": {
            "samples": args.samples,
            "paths": args.paths,
            "dt": args.dt,
            "T": args.T,
            "tol": args.tol,
            "seed": args.seed,
            "x0": _x0(args, spec),
        },
        "exit_fraction": float(np.mean(exits < args.T)),
        "checks": checks,
        "all_pass": all(c["pass"] is True for c in checks),
    }
    _emit(args.out, _dump_json(report))
    return EXIT_OK


def cmd_classify(args) -> int:
    spec = _load(args)
    x0 = _x0(args, spec)
    cfg = ClassifyConfig(
        samples=args.samples,
        paths=args.paths,
        dt=args.dt,
        T=args.T,
        tol=args.tol,
        seed=args.seed,
        x0=tuple(float(v) for v in x0),
    )
    report = classify(spec, cfg)
    _emit(args.out, _dump_json(report.to_dict()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (v > 0 and np.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return v


def _int_at_least(lo: int):
    def parse(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be at least {lo}")
        return v

    return parse


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _x0_arg(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--x0 expects comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="einsteinprobe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", required=True, help="spec file path or catalog:KEY")
    common.add_argument("--seed", type=_seed, default=0)
    common.add_argument("--out", default="-", help="output path, '-' for stdout")
    common.add_argument("--param", action="append", metavar="NAME=VALUE", help="override a spec parameter")

    p = sub.add_parser("validate", parents=[common], help="parse and check a spec")
    p.add_argument("--samples", type=_int_at_least(2), default=64)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("curvature", parents=[common], help="curvature table at sampled points")
    p.add_argument("--samples", type=_int_at_least(2), default=200)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_curvature)

    stochastic = argparse.ArgumentParser(add_help=False)
    stochastic.add_argument("--dt", type=_positive_float, default=1e-3)
    stochastic.add_argument("--T", type=_positive_float, default=1.0)
    stochastic.add_argument("--x0", type=_x0_arg, default=None, help="start point, comma-separated (default: domain center)")

    p = sub.add_parser("simulate", parents=[common, stochastic], help="dump Brownian paths")
    p.add_argument("--paths", type=_int_at_least(1), default=1)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_simulate)

    for name, func, fmt_help in (
        ("verify", cmd_verify, "run the stochastic identity checks"),
        ("classify", cmd_classify, "classify the metric"),
    ):
        p = sub.add_parser(name, parents=[common, stochastic], help=fmt_help)
        p.add_argument("--samples", type=_int_at_least(2), default=200)
        p.add_argument("--paths", type=_int_at_least(1), default=256)
        p.add_argument("--tol", type=_positive_float, default=1e-6)
        p.add_argument("--format", choices=("json",), default="json")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "T") and args.T < args.dt:
        parser.error("--T must be at least --dt")
    try:
        return args.func(args)
    except (SpecError, MetricError, ExprError, OSError, ValueError, KeyError) as exc:
        return _error(exc)


if __name__ == "__main__":
    sys.exit(main())
