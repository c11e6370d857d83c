"""Integer token arithmetic shared by the three consensus algorithms.

Everything here is pure: functions take values and return new values.
Probabilities are exact ``Fraction`` objects and sampling draws a single
integer against the cumulative numerators, so no floating point enters the
protocol path.
"""

from __future__ import annotations

import bisect
import functools
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Protocol, Sequence


class DepartureConditionViolated(Exception):
    """A departing node has no qualifying out-neighbor to hand its mass to."""

    def __init__(self, node: int | None = None, message: str | None = None):
        self.node = node
        self.payload: MassPair | None = None
        self.step: int | None = None
        super().__init__(message or f"node {node} has no qualifying out-neighbor")


class IntRng(Protocol):
    def randrange(self, stop: int) -> int: ...


@dataclass(frozen=True, slots=True)
class MassPair:
    """Aggregate token mass held by a node: value sum ``y`` and token count ``z``.

    ``z`` may dip below zero transiently under the closed-handoff rule when
    several negative corrections land on the same receiver.
    """

    y: int = 0
    z: int = 0

    def __add__(self, other: "MassPair") -> "MassPair":
        return MassPair(self.y + other.y, self.z + other.z)

    def __sub__(self, other: "MassPair") -> "MassPair":
        return MassPair(self.y - other.y, self.z - other.z)

    def is_zero(self) -> bool:
        return self.y == 0 and self.z == 0

    def to_list(self) -> list[int]:
        return [self.y, self.z]


ZERO = MassPair(0, 0)


@dataclass(frozen=True, slots=True)
class StateTriple:
    y_s: int
    z_s: int
    q_s: int

    @classmethod
    def from_mass(cls, mass: MassPair) -> "StateTriple":
        if mass.z < 1:
            raise ValueError(f"cannot snapshot state from mass with z={mass.z}")
        return cls(mass.y, mass.z, mass.y // mass.z)

    def to_list(self) -> list[int]:
        return [self.y_s, self.z_s, self.q_s]


@dataclass(frozen=True, slots=True)
class NodeRecord:
    """Per-node protocol variables.

    ``eta`` is the participation flag (1 until the node has been active) and
    ``nu`` the last step at which the state triple was written (-1 = never).
    Both only matter for the indefinitely-open variant.
    """

    id: int
    x: int
    mass: MassPair = ZERO
    state: StateTriple | None = None
    eta: int = 1
    nu: int = -1
    r: int = 1

    def evolve(
        self,
        mass: MassPair | None = None,
        state: StateTriple | None = None,
        eta: int | None = None,
        nu: int | None = None,
    ) -> "NodeRecord":
        """Copy with some fields changed; cheaper than ``dataclasses.replace``."""
        return NodeRecord(
            self.id,
            self.x,
            self.mass if mass is None else mass,
            self.state if state is None else state,
            self.eta if eta is None else eta,
            self.nu if nu is None else nu,
            self.r,
        )


@dataclass(frozen=True, slots=True)
class TransmissionMessage:
    sender: int
    receiver: int
    c_y: int
    c_z: int
    emit_step: int
    deliver_step: int

    def __post_init__(self) -> None:
        if self.deliver_step < self.emit_step:
            raise ValueError("message delivered before it was emitted")

    @property
    def payload(self) -> MassPair:
        return MassPair(self.c_y, self.c_z)

    def to_dict(self) -> dict:
        return {
            "from": self.sender,
            "to": self.receiver,
            "c_y": self.c_y,
            "c_z": self.c_z,
            "emit_step": self.emit_step,
            "deliver_step": self.deliver_step,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TransmissionMessage":
        return cls(d["from"], d["to"], d["c_y"], d["c_z"], d["emit_step"], d["deliver_step"])


@functools.lru_cache(maxsize=None)
def _unit(m: int) -> Fraction:
    return Fraction(1, m)


def remaining_probabilities(out_remaining: Iterable[int], self_id: int) -> dict[int, Fraction]:
    """Uniform weights over the remaining out-neighbors plus the virtual self-edge."""
    targets = set(out_remaining)
    if self_id in targets:
        raise ValueError("self must not be listed among its own out-neighbors")
    targets.add(self_id)
    p = _unit(len(targets))
    return {v: p for v in sorted(targets)}


def departing_probabilities(out_qualifying: Iterable[int]) -> dict[int, Fraction]:
    targets = sorted(set(out_qualifying))
    if not targets:
        raise DepartureConditionViolated()
    p = _unit(len(targets))
    return {v: p for v in targets}


def _cumulative(probs: Mapping[int, Fraction]) -> tuple[list[int], list[int], int]:
    if not probs:
        raise ValueError("empty probability map")
    keys = sorted(probs)
    m = len(keys)
    unit = _unit(m)
    # maps built here share one cached Fraction, so the identity-first count is a cheap uniform check
    if list(probs.values()).count(unit) == m:
        return keys, list(range(1, m + 1)), m
    denom = math.lcm(*(probs[k].denominator for k in keys))
    cum = list(itertools.accumulate(probs[k].numerator * (denom // probs[k].denominator) for k in keys))
    if cum[-1] != denom:
        raise ValueError("probabilities do not sum to 1")
    return keys, cum, denom


def sample_target(probs: Mapping[int, Fraction], rng: IntRng) -> int:
    """Draw one key of ``probs`` with a single integer draw.

    Keys are visited in ascending order; the draw is uniform on
    ``[0, lcm of denominators)`` and compared against cumulative numerators.
    """
    keys, cum, denom = _cumulative(probs)
    return keys[bisect.bisect_right(cum, rng.randrange(denom))]


def split_mass(
    mass: MassPair,
    targets: Mapping[int, Fraction],
    self_id: int,
    rng: IntRng,
) -> tuple[MassPair, list[tuple[int, MassPair]]]:
    """Peel ``mass`` into unit-weight pieces and scatter them over ``targets``.

    While more than one token remains, ``floor(y / z)`` is peeled off and
    sent to a sampled target; the last piece always stays home. Pieces drawn
    to ``self_id`` accumulate in the kept bucket. Sends are aggregated per
    target and returned in ascending target order. Each piece costs exactly
    one ``sample_target`` draw.
    """
    if mass.z < 0:
        raise ValueError(f"split_mass requires z >= 0, got {mass.z}")
    if mass.z <= 1:
        return mass, []
    keys, cum, denom = _cumulative(targets)
    buckets: dict[int, list[int]] = {}
    y, z = mass.y, mass.z
    while z > 1:
        piece = y // z
        target = keys[bisect.bisect_right(cum, rng.randrange(denom))]
        bucket = buckets.setdefault(target, [0, 0])
        bucket[0] += piece
        bucket[1] += 1
        y -= piece
        z -= 1
    home = buckets.pop(self_id, [0, 0])
    kept = MassPair(home[0] + y, home[1] + z)
    sends = [(t, MassPair(*buckets[t])) for t in sorted(buckets)]
    return kept, sends


def merge_received(kept: MassPair, inbox: Sequence[MassPair] = ()) -> MassPair:
    y, z = kept.y, kept.z
    for m in inbox:
        y += m.y
        z += m.z
    return MassPair(y, z)


def arrival_init(x: int, r: int = 1) -> tuple[MassPair, StateTriple]:
    mass = MassPair(2 * x, 2 * r)
    return mass, StateTriple.from_mass(mass)


def departure_handoff_closed(mass: MassPair, x: int, r: int = 1) -> MassPair:
    """Forward everything held, minus the node's own doubled initial tokens."""
    return MassPair(mass.y - 2 * x, mass.z - 2 * r)


def departure_handoff_open(mass: MassPair) -> MassPair:
    return MassPair(mass.y, mass.z)


def arrival_init_open(record: NodeRecord) -> tuple[MassPair, StateTriple]:
    """Arrival for the indefinitely-open variant.

    A first-time arrival injects its initial tokens; a returning node comes
    back empty-handed and reuses the state it last wrote.
    """
    if record.eta not in (0, 1):
        raise ValueError(f"eta must be 0 or 1, got {record.eta}")
    if record.eta == 1:
        return arrival_init(record.x, record.r)
    if record.nu < 0 or record.state is None:
        raise ValueError(f"node {record.id} re-activates without any prior state update")
    return ZERO, record.state
