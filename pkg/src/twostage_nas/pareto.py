"""Dominance, nondominated sorting, the Pareto archive, and Partial Order Pruning."""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import TypeVar

import numpy as np

from .space import BackboneEncoding, ModularCandidate

T = TypeVar("T")

LATENCY_MS = "latency_ms"
GFLOPS = "gflops"


class ObjectiveKindError(ValueError):
    """Points or records measured with different cost metrics were mixed."""


@dataclass(frozen=True)
class ObjectivePoint:
    cost: float
    accuracy: float
    kind: str = LATENCY_MS

    def __post_init__(self):
        if not (math.isfinite(self.cost) and math.isfinite(self.accuracy)):
            raise ValueError("objective values must be finite")
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 100]")


def dominates(a: ObjectivePoint, b: ObjectivePoint, eps: float = 0.0) -> bool:
    """True if ``a`` is no worse than ``b`` on both objectives and better on one.

    ``eps`` widens the cost comparison to absorb latency jitter.
    """
    if a.kind != b.kind:
        raise ObjectiveKindError(f"cannot compare {a.kind} with {b.kind}")
    no_worse = a.cost <= b.cost + eps and a.accuracy >= b.accuracy
    better = a.cost < b.cost - eps or a.accuracy > b.accuracy
    return no_worse and better


def _objective(item) -> ObjectivePoint:
    return item if isinstance(item, ObjectivePoint) else item.objective


def nondominated_sort(items: Sequence[T], key: Callable[[T], ObjectivePoint] = _objective) -> list[list[T]]:
    """Partition ``items`` into fronts; ``fronts[0]`` is nondominated.

    Items may be ObjectivePoints or anything exposing ``.objective``.
    """
    if not items:
        return []
    points = [key(it) for it in items]
    kinds = {p.kind for p in points}
    if len(kinds) > 1:
        raise ObjectiveKindError(f"mixed objective kinds: {sorted(kinds)}")
    cost = np.array([p.cost for p in points])
    acc = np.array([p.accuracy for p in points])
    c_le = cost[:, None] <= cost[None, :]
    c_lt = cost[:, None] < cost[None, :]
    a_ge = acc[:, None] >= acc[None, :]
    a_gt = acc[:, None] > acc[None, :]
    dom = c_le & a_ge & (c_lt | a_gt)  # dom[i, j]: i dominates j
    counts = dom.sum(axis=0)
    remaining = np.ones(len(items), dtype=bool)
    fronts = []
    while remaining.any():
        current = remaining & (counts == 0)
        idx = np.flatnonzero(current)
        fronts.append([items[i] for i in idx])
        remaining &= ~current
        counts = counts - dom[idx].sum(axis=0)
    return fronts


# --------------------------------------------------------------------------
# Archive


class InsertOutcome(str, Enum):
    ENTERED_FRONT = "entered_front"
    DOMINATED = "dominated"
    DUPLICATE = "duplicate"


class ParetoArchive:
    """Nondominated records plus everything ever inserted.

    Records need ``.id``, ``.key`` (candidate identity) and ``.objective``.
    Single writer: only one owner calls :meth:`insert`; readers take
    :meth:`snapshot`.
    """

    def __init__(self, kind: str, eps: float = 0.0):
        self.kind = kind
        self.eps = eps
        self._front: dict[str, object] = {}
        self._history: dict[str, object] = {}
        self._keys: set[str] = set()

    @property
    def front(self) -> list:
        return sorted(self._front.values(), key=lambda r: (r.objective.cost, -r.objective.accuracy, r.id))

    @property
    def history(self) -> list:
        return list(self._history.values())

    def __len__(self) -> int:
        return len(self._history)

    def __contains__(self, key: str) -> bool:
        return key in self._keys

    def front_ids(self) -> frozenset[str]:
        return frozenset(self._front)

    def insert(self, record) -> InsertOutcome:
        point = record.objective
        if point.kind != self.kind:
            raise ObjectiveKindError(f"archive holds {self.kind}, record is {point.kind}")
        if record.key in self._keys or record.id in self._history:
            return InsertOutcome.DUPLICATE
        self._keys.add(record.key)
        self._history[record.id] = record
        for other in self._front.values():
            if dominates(other.objective, point, self.eps):
                return InsertOutcome.DOMINATED
        beaten = [rid for rid, other in self._front.items() if dominates(point, other.objective, self.eps)]
        for rid in beaten:
            del self._front[rid]
        self._front[record.id] = record
        return InsertOutcome.ENTERED_FRONT

    def snapshot(self) -> tuple:
        return tuple(self.front)

    def points(self) -> list[ObjectivePoint]:
        return [r.objective for r in self.front]


# --------------------------------------------------------------------------
# Backbone partial order


class OrderRelation(str, Enum):
    PRECEDES = "precedes"
    SUCCEEDS = "succeeds"
    EQUAL = "equal"
    INCOMPARABLE = "incomparable"


def _is_subsequence(short: Sequence[int], long: Sequence[int]) -> bool:
    it = iter(long)
    return all(any(c == x for x in it) for c in short)


def precedes_or_equal(a: BackboneEncoding, b: BackboneEncoding) -> bool:
    """``a`` is shallower/narrower than or equal to ``b``."""
    return (
        a.block == b.block
        and a.base <= b.base
        and all(_is_subsequence(sa, sb) for sa, sb in zip(a.stages, b.stages))
    )


def backbone_partial_order(a: BackboneEncoding, b: BackboneEncoding) -> OrderRelation:
    ab = precedes_or_equal(a, b)
    ba = precedes_or_equal(b, a)
    if ab and ba:
        return OrderRelation.EQUAL
    if ab:
        return OrderRelation.PRECEDES
    if ba:
        return OrderRelation.SUCCEEDS
    return OrderRelation.INCOMPARABLE


def candidate_precedes(a, b) -> bool:
    """Partial order on encodings or modular candidates.

    Candidates additionally require ``a.fpn_channels <= b.fpn_channels``.
    """
    if isinstance(a, ModularCandidate) and isinstance(b, ModularCandidate):
        return a.fpn_channels <= b.fpn_channels and precedes_or_equal(a.encoding, b.encoding)
    return precedes_or_equal(a, b)


def pop_accuracy_upper_bound(candidate, evaluated: Iterable[tuple[object, float]]) -> float | None:
    """Lowest accuracy among evaluated models at least as deep and wide.

    Valid as an upper bound on ``candidate``'s accuracy whenever accuracy
    never decreases along the partial order.
    """
    bound = None
    for other, acc in evaluated:
        if candidate_precedes(candidate, other) and (bound is None or acc < bound):
            bound = acc
    return bound


def should_prune(candidate, cost: float, archive: ParetoArchive, evaluated) -> bool:
    """True if ``candidate`` cannot enter the front even at its accuracy bound.

    A candidate is pruned when some archived point strictly dominates
    ``(cost, bound)``; a point that merely ties the bound is not enough,
    because ties stay on the front.
    """
    if not archive.front:
        return False
    bound = pop_accuracy_upper_bound(candidate, evaluated)
    if bound is None:
        return False
    probe = ObjectivePoint(cost, min(max(bound, 0.0), 100.0), archive.kind)
    return any(dominates(p, probe, archive.eps) for p in archive.points())
