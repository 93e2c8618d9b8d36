from __future__ import annotations

import numpy as np
import pytest

from fedcrop.errors import AggregationError, ShapeError
from fedcrop.params import ParameterSet, Tensor, schema_of


def make(seed=0):
    rng = np.random.default_rng(seed)
    return ParameterSet.from_arrays({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)})


def test_tensor_values_match_shape():
    t = Tensor("w", np.arange(6.0).reshape(2, 3))
    assert t.shape == (2, 3)
    assert t.size == len(t.values) == 6
    assert t.values.tolist() == [0, 1, 2, 3, 4, 5]


def test_vector_round_trip_is_exact():
    p = make()
    q = p.with_vector(p.to_vector())
    assert p.bit_equal(q)
    assert q.schema_id == p.schema_id


def test_schema_depends_on_names_shapes_and_order():
    assert schema_of([("a", (2, 3)), ("b", (4,))]) != schema_of([("b", (4,)), ("a", (2, 3))])
    assert schema_of([("a", (2, 3))]) != schema_of([("a", (3, 2))])
    assert make(0).schema_id == make(1).schema_id


def test_incompatible_sets_are_rejected():
    other = ParameterSet.from_arrays({"a": np.zeros((3, 2)), "b": np.zeros(4)})
    with pytest.raises(AggregationError):
        make().check_compatible(other)


def test_duplicate_names_rejected():
    with pytest.raises((ShapeError, ValueError)):
        ParameterSet([Tensor("a", np.zeros(2)), Tensor("a", np.zeros(2))])


def test_non_finite_values_rejected():
    with pytest.raises((ShapeError, ValueError, FloatingPointError)):
        Tensor("a", np.array([1.0, np.nan]))


def test_copy_is_independent():
    p = make()
    q = p.copy()
    q["a"][0, 0] += 1.0
    assert p.max_abs_diff(q) == pytest.approx(1.0)
