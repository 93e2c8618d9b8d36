"""Parameter averaging: FedAvg on the server, neighbour averaging on DFL nodes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AggregationError, ProtocolError, RoundSyncError
from .params import ParameterSet


@dataclass(frozen=True)
class ModelUpdate:
    sender_id: int
    round: int
    params: ParameterSet


def _mean(param_sets: Sequence[ParameterSet], divisor: int) -> ParameterSet:
    first = param_sets[0]
    for p in param_sets[1:]:
        first.check_compatible(p)
    vectors = [p.to_vector() for p in param_sets]
    if divisor != len(vectors):
        total = np.zeros(first.size)
        for v in vectors:
            total += v
        return first.with_vector(total / divisor)
    # mean taken as offsets from the first set: identical inputs come back
    # bit-exact, and clipping keeps every coordinate inside the input range
    base = vectors[0]
    acc = np.zeros(first.size)
    for v in vectors[1:]:
        acc += v - base
    out = base + acc / len(vectors)
    if len(vectors) > 1:
        stack = np.vstack(vectors)
        np.clip(out, stack.min(axis=0), stack.max(axis=0), out=out)
    return first.with_vector(out)


def _ordered(updates: Sequence[ModelUpdate]) -> list[ParameterSet]:
    # fixed summation order makes the result independent of arrival order
    return [u.params for u in sorted(updates, key=lambda u: (u.sender_id, u.round))]


def fedavg(updates: Sequence[ModelUpdate], divisor: int | None = None) -> ParameterSet:
    """Element-wise mean of the received updates.

    ``divisor`` overrides the count of updates; pass the number of connected
    clients to reproduce the literal ``1/N_c`` scaling under partial
    participation.
    """
    if not updates:
        raise ProtocolError("fedavg needs at least one update")
    n = len(updates) if divisor is None else divisor
    if n < 1:
        raise AggregationError(f"invalid divisor {n}")
    return _mean(_ordered(updates), n)


def neighbor_average(received: Sequence[ModelUpdate], own: ParameterSet, include_self: bool = False,
                     expected: int | None = None) -> ParameterSet:
    """Mean of the neighbours' models, optionally with the node's own model.

    ``expected`` is the node's neighbour count; a different number of
    received updates means the round barrier was broken.
    """
    if expected is not None and len(received) != expected:
        raise RoundSyncError(f"expected {expected} neighbour updates, got {len(received)}")
    if not received:
        raise RoundSyncError("no neighbour updates to aggregate")
    sets = _ordered(received)
    for p in sets:
        own.check_compatible(p)
    if include_self:
        sets = sets + [own]
    return _mean(sets, len(sets))
