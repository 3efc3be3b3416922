import json
import math

import numpy as np
import pytest

from einsteinprobe.expr import Const, EvaluationError, evaluate
from einsteinprobe.geometry import MetricError, metric_at
from einsteinprobe.manifold import (
    CATALOG_KEYS,
    SpecError,
    SpecSyntaxError,
    builtin_spec,
    load_spec,
    parse_manifold,
)


def doc(**over):
    base = {
        "name": "t",
        "dim": 2,
        "coords": ["x", "y"],
        "params": {},
        "domain": [[-1, 1], [-1, 1]],
        "metric": [["1", "0"], ["0", "1"]],
    }
    base.update(over)
    return json.dumps(base)


def test_flat_spec_has_identity_metric():
    spec = parse_manifold(doc())
    assert spec.dim == 2
    for x in ([0.0, 0.0], [0.7, -0.3]):
        np.testing.assert_array_equal(metric_at(spec, x), np.eye(2))


def test_sphere_chart_spec_at_equator():
    spec = parse_manifold(
        json.dumps(
            {
                "name": "s",
                "dim": 2,
                "coords": ["theta", "phi"],
                "params": {"R": 1},
                "domain": [[0.3, 2.8], [0.1, 6.1]],
                "metric": [["R^2", 0], [0, "R^2*sin(theta)^2"]],
            }
        )
    )
    np.testing.assert_allclose(metric_at(spec, [math.pi / 2, 1.0]), np.eye(2), atol=1e-15)


def test_malformed_text_reports_location():
    with pytest.raises(SpecSyntaxError) as info:
        parse_manifold("dim = banana")
    assert info.value.position is not None
    assert "line 1" in str(info.value)


def test_expression_syntax_error_is_located():
    with pytest.raises(SpecSyntaxError, match=r"\[0\]\[0\].*position"):
        parse_manifold(doc(metric=[["1 +", 0], [None, 1]]))


def test_lower_triangle_filled_by_symmetry():
    spec = parse_manifold(doc(metric=[["2", "x"], [None, "3"]], domain=[[-0.5, 0.5], [-0.5, 0.5]]))
    assert spec.metric[1][0] == spec.metric[0][1]


@pytest.mark.parametrize(
    "override, match",
    [
        ({"dim": 3}, "dimension mismatch"),
        ({"coords": ["x"]}, "dimension mismatch"),
        ({"domain": [[-1, 1]]}, "dimension mismatch"),
        ({"metric": [["1"]]}, "dimension mismatch"),
        ({"metric": [["1", "banana"], [None, "1"]]}, "unknown identifier"),
        ({"metric": [["1", "0.1"], ["0.2", "1"]]}, "non-symmetric"),
        ({"metric": [["1", None], ["0", "1"]]}, "may not be null"),
        ({"domain": [[1, 1], [-1, 1]]}, "empty or inverted"),
        ({"domain": [[2, 1], [-1, 1]]}, "empty or inverted"),
        ({"dim": 0}, "positive integer"),
    ],
)
def test_spec_errors(override, match):
    with pytest.raises(SpecError, match=match):
        parse_manifold(doc(**override))


def test_non_spd_metric_rejected():
    with pytest.raises(MetricError, match="not positive definite") as info:
        parse_manifold(doc(metric=[["1", 0], [None, "-1"]]))
    assert info.value.minor == 2


def test_evaluation_error_surfaces():
    with pytest.raises(EvaluationError):
        parse_manifold(doc(metric=[["1/0", 0], [None, 1]]))


@pytest.mark.parametrize("key", CATALOG_KEYS)
def test_catalog_round_trip(key):
    spec = builtin_spec(key)
    again = parse_manifold(spec.dumps())
    assert again == spec
    assert again.metric == spec.metric


def test_catalog_sphere_domain():
    spec = builtin_spec("sphere2")
    assert spec.coords == ("theta", "phi")
    assert spec.domain == ((0.3, 2.8), (0.1, 6.1))


def test_catalog_euclidean():
    spec = builtin_spec("euclidean2")
    assert spec.domain == ((-5.0, 5.0), (-5.0, 5.0))
    assert all(e == Const(1.0 if i == j else 0.0) for i, row in enumerate(spec.metric) for j, e in enumerate(row))


def test_unknown_catalog_key():
    with pytest.raises(KeyError, match="minkowski"):
        builtin_spec("minkowski")
    with pytest.raises(SpecError):
        load_spec("catalog:minkowski")


def test_metric_is_structurally_symmetric(catalog):
    for spec in catalog.values():
        for i in range(spec.dim):
            for j in range(spec.dim):
                assert spec.metric[i][j] == spec.metric[j][i]


def test_with_params_rescales():
    spec = builtin_spec("sphere2").with_params(R=2)
    assert evaluate(spec.metric[0][0], [1.0, 1.0], spec.params) == 4.0
    with pytest.raises(SpecError):
        spec.with_params(Q=1)


def test_load_spec_from_file(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(doc())
    assert load_spec(str(p)).name == "t"
