"""Named, shaped float64 tensors and the ordered sets of them that get
trained, averaged and shipped over the wire."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import AggregationError, ShapeError


@dataclass(frozen=True)
class Tensor:
    name: str
    array: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.array, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor {self.name!r} has a non-positive dimension {arr.shape}")
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"tensor {self.name!r} holds NaN or infinite values")
        object.__setattr__(self, "array", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view."""
        return self.array.reshape(-1)

    @property
    def size(self) -> int:
        return self.array.size


def schema_of(items: Iterable[tuple[str, tuple[int, ...]]]) -> str:
    h = hashlib.sha256()
    for name, shape in items:
        h.update(name.encode("utf-8"))
        h.update(b":")
        h.update(",".join(str(d) for d in shape).encode("ascii"))
        h.update(b";")
    return h.hexdigest()[:16]


class ParameterSet:
    """Ordered collection of uniquely named tensors.

    Two sets can be averaged together only when their ``schema_id`` (a hash of
    the ordered names and shapes) agrees.
    """

    def __init__(self, tensors: Iterable[Tensor] = ()):
        self.tensors: list[Tensor] = list(tensors)
        names = [t.name for t in self.tensors]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate tensor names in {names}")
        self._index = {t.name: i for i, t in enumerate(self.tensors)}
        self.schema_id = schema_of((t.name, t.shape) for t in self.tensors)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParameterSet":
        return cls(Tensor(name, np.asarray(a, dtype=np.float64)) for name, a in arrays.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[self._index[name]].array

    def __repr__(self) -> str:
        inner = ", ".join(f"{t.name}{list(t.shape)}" for t in self.tensors)
        return f"ParameterSet([{inner}])"

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.tensors]

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {t.name: t.array for t in self.tensors}

    def to_vector(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([t.values for t in self.tensors])

    def with_vector(self, vec: np.ndarray) -> "ParameterSet":
        """Same schema, values taken from a flat vector (copied)."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"vector of length {vec.size} does not fit schema of size {self.size}")
        out, pos = [], 0
        for t in self.tensors:
            out.append(Tensor(t.name, vec[pos:pos + t.size].reshape(t.shape).copy()))
            pos += t.size
        return ParameterSet(out)

    def copy(self) -> "ParameterSet":
        return ParameterSet(Tensor(t.name, t.array.copy()) for t in self.tensors)

    def check_compatible(self, other: "ParameterSet") -> None:
        if self.schema_id != other.schema_id:
            raise AggregationError(
                f"schema mismatch: {self.schema_id} vs {other.schema_id}")

    def bit_equal(self, other: "ParameterSet") -> bool:
        if self.schema_id != other.schema_id:
            return False
        return all(
            a.array.tobytes() == b.array.tobytes() for a, b in zip(self.tensors, other.tensors))

    def max_abs_diff(self, other: "ParameterSet") -> float:
        self.check_compatible(other)
        if not self.tensors:
            return 0.0
        return float(np.max(np.abs(self.to_vector() - other.to_vector())))
