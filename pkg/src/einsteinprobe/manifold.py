"""Manifold specification files and the bundled catalog."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from typing import Any, Mapping, Sequence

import numpy as np

from .expr import (
    Const,
    Expr,
    ExprError,
    ExprSyntaxError,
    UnknownIdentifierError,
    param_names,
    parse_expr,
    to_string,
)

CATALOG_KEYS = ("euclidean2", "flat_torus3", "sphere2", "hyperbolic2", "s2_x_s1", "bumpy_sphere2")


class SpecError(Exception):
    """Invalid manifold specification."""


class SpecSyntaxError(SpecError):
    def __init__(self, message: str, position: int | None = None, token: str | None = None):
        super().__init__(message)
        self.position = position
        self.token = token


@dataclass(frozen=True, eq=False)
class ManifoldSpec:
    """A single coordinate chart with a Riemannian metric given by expressions."""

    name: str
    dim: int
    coords: tuple[str, ...]
    params: Mapping[str, float]
    domain: tuple[tuple[float, float], ...]
    metric: tuple[tuple[Expr, ...], ...]
    validation: dict = field(default_factory=dict, compare=False, repr=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ManifoldSpec):
            return NotImplemented
        return (
            self.name == other.name
            and self.dim == other.dim
            and self.coords == other.coords
            and dict(self.params) == dict(other.params)
            and self.domain == other.domain
            and self.metric == other.metric
        )

    __hash__ = object.__hash__

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.domain])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.domain])

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x: Sequence[float]) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def with_params(self, **overrides: float) -> "ManifoldSpec":
        unknown = set(overrides) - set(self.params)
        if unknown:
            raise SpecError(f"unknown parameter(s): {sorted(unknown)}")
        params = dict(self.params)
        params.update({k: float(v) for k, v in overrides.items()})
        return replace(self, params=params)

    @cached_property
    def compiled(self):
        from .geometry import CompiledMetric

        return CompiledMetric(self)

    def to_dict(self) -> dict[str, Any]:
        metric: list[list[Any]] = []
        for i in range(self.dim):
            row: list[Any] = []
            for j in range(self.dim):
                row.append(None if j < i else to_string(self.metric[i][j]))
            metric.append(row)
        return {
            "name": self.name,
            "dim": self.dim,
            "coords": list(self.coords),
            "params": dict(self.params),
            "domain": [[lo, hi] for lo, hi in self.domain],
            "metric": metric,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise SpecError(message)


def _parse_entry(entry: Any, coords: Sequence[str], params: Sequence[str], where: str) -> Expr:
    if isinstance(entry, bool):
        raise SpecError(f"metric entry {where}: booleans are not expressions")
    if isinstance(entry, (int, float)):
        return Const(float(entry))
    if not isinstance(entry, str):
        raise SpecError(f"metric entry {where}: expected number or expression string, got {type(entry).__name__}")
    try:
        return parse_expr(entry, coords, params)
    except ExprSyntaxError as exc:
        raise SpecSyntaxError(f"metric entry {where}: {exc}", exc.position, exc.token) from exc
    except UnknownIdentifierError as exc:
        raise SpecError(f"metric entry {where}: {exc}") from exc


def parse_manifold(text: str, validate: bool = True) -> ManifoldSpec:
    """Parse a JSON manifold specification.

    Lower-triangle metric entries may be ``null`` and are filled by symmetry.
    With ``validate`` set, the metric is checked for positive definiteness on
    a sample of the domain box.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecSyntaxError(f"JSON syntax error: {exc.msg} at line {exc.lineno} column {exc.colno}", exc.pos, text[exc.pos : exc.pos + 1]) from exc
    return spec_from_dict(doc, validate=validate)


def spec_from_dict(doc: Any, validate: bool = True) -> ManifoldSpec:
    _require(isinstance(doc, dict), "spec must be a JSON object")
    for key in ("name", "dim", "coords", "domain", "metric"):
        _require(key in doc, f"missing field {key!r}")
    name = doc["name"]
    _require(isinstance(name, str), "name must be a string")
    dim = doc["dim"]
    _require(isinstance(dim, int) and not isinstance(dim, bool) and dim > 0, "dim must be a positive integer")

    coords = doc["coords"]
    _require(isinstance(coords, list) and all(isinstance(c, str) for c in coords), "coords must be a list of strings")
    _require(len(coords) == dim, f"dimension mismatch: dim={dim} but {len(coords)} coords")
    _require(len(set(coords)) == dim, "coordinate names must be distinct")

    params = doc.get("params") or {}
    _require(isinstance(params, dict), "params must be an object")
    for k, v in params.items():
        _require(isinstance(v, (int, float)) and not isinstance(v, bool), f"parameter {k!r} must be a number")
        _require(k not in coords, f"parameter {k!r} shadows a coordinate")
    params = {k: float(v) for k, v in params.items()}

    domain = doc["domain"]
    _require(isinstance(domain, list) and len(domain) == dim, f"dimension mismatch: domain must have {dim} intervals")
    box = []
    for i, iv in enumerate(domain):
        _require(
            isinstance(iv, list) and len(iv) == 2 and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in iv),
            f"domain interval {i} must be [lo, hi]",
        )
        lo, hi = float(iv[0]), float(iv[1])
        _require(lo < hi, f"empty or inverted domain interval {i}: [{lo}, {hi}]")
        box.append((lo, hi))

    metric = doc["metric"]
    _require(
        isinstance(metric, list) and len(metric) == dim and all(isinstance(r, list) and len(r) == dim for r in metric),
        f"dimension mismatch: metric must be {dim}x{dim}",
    )
    rows: list[list[Expr | None]] = [[None] * dim for _ in range(dim)]
    for i in range(dim):
        for j in range(dim):
            entry = metric[i][j]
            if entry is None:
                _require(j < i, f"metric entry [{i}][{j}] may not be null (only strictly below the diagonal)")
                continue
            rows[i][j] = _parse_entry(entry, coords, list(params), f"[{i}][{j}]")
    for i in range(dim):
        for j in range(i):
            upper, lower = rows[j][i], rows[i][j]
            if lower is None:
                rows[i][j] = upper
            elif lower != upper:
                raise SpecError(f"non-symmetric metric: entries [{i}][{j}] and [{j}][{i}] differ")
    spec = ManifoldSpec(
        name=name,
        dim=dim,
        coords=tuple(coords),
        params=params,
        domain=tuple(box),
        metric=tuple(tuple(r) for r in rows),  # type: ignore[arg-type]
    )
    if validate:
        validate_spec(spec)
    return spec


def validation_points(spec: ManifoldSpec, count: int = 64) -> np.ndarray:
    """Corners, center and a Halton sample of the domain box."""
    from .sampling import sample_domain

    pts = [spec.center]
    if spec.dim <= 4:
        grids = np.meshgrid(*[[lo, hi] for lo, hi in spec.domain], indexing="ij")
        pts.extend(np.stack([g.ravel() for g in grids], axis=-1))
    return np.vstack([np.array(pts), sample_domain(spec, count)])


def validate_spec(spec: ManifoldSpec, count: int = 64) -> None:
    """Check the metric is finite and positive definite on a validation sample.

    Raises :class:`~einsteinprobe.geometry.MetricError` or
    :class:`~einsteinprobe.expr.EvaluationError`.
    """
    from .geometry import check_spd

    for e in (e for row in spec.metric for e in row):
        missing = param_names(e) - set(spec.params)
        if missing:
            raise SpecError(f"unbound parameter(s) {sorted(missing)}")
    pts = validation_points(spec, count)
    g = spec.compiled.metric(pts)
    check_spd(g, pts)


def _catalog_text(key: str) -> str:
    return resources.files("einsteinprobe").joinpath("catalog", f"{key}.json").read_text(encoding="utf-8")


def builtin_spec(name: str) -> ManifoldSpec:
    """Return a bundled catalog spec by key."""
    if name not in CATALOG_KEYS:
        raise KeyError(f"unknown catalog key {name!r}; expected one of {', '.join(CATALOG_KEYS)}")
    return parse_manifold(_catalog_text(name))


def load_spec(ref: str) -> ManifoldSpec:
    """Load ``catalog:KEY`` or a path to a JSON spec file."""
    if ref.startswith("catalog:"):
        key = ref.split(":", 1)[1]
        try:
            return builtin_spec(key)
        except KeyError as exc:
            raise SpecError(str(exc.args[0])) from exc
    with open(ref, encoding="utf-8") as fh:
        return parse_manifold(fh.read())


__all__ = [
    "CATALOG_KEYS",
    "ExprError",
    "ManifoldSpec",
    "SpecError",
    "SpecSyntaxError",
    "builtin_spec",
    "load_spec",
    "parse_manifold",
    "spec_from_dict",
    "validate_spec",
]
