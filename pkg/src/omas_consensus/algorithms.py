"""Per-node behaviour of the three algorithms, one function per operating mode.

Each step function is pure: it takes a ``NodeRecord`` plus what the node
observes at step ``k`` and returns the updated record with the messages it
emits. ``inbox`` holds payloads already delivered to the node this round;
the engine may merge later same-round deliveries afterwards, which is
equivalent because merging is a plain sum.
"""

from __future__ import annotations

from enum import Enum
from typing import Iterable, Sequence

from .protocol import (
    ZERO,
    DepartureConditionViolated,
    IntRng,
    MassPair,
    NodeRecord,
    StateTriple,
    TransmissionMessage,
    arrival_init,
    arrival_init_open,
    departing_probabilities,
    departure_handoff_closed,
    departure_handoff_open,
    merge_received,
    remaining_probabilities,
    sample_target,
    split_mass,
)
from .topology import NodeSets


class AlgorithmKind(str, Enum):
    QAOD = "qaod"
    QAPOD = "qapod"
    QAIOD = "qaiod"


class Mode(str, Enum):
    REMAINING = "remaining"
    ARRIVING = "arriving"
    DEPARTING = "departing"
    DEPARTING_SOON = "departing_soon"
    LONG_TERM_REMAINING = "long_term_remaining"
    INACTIVE = "inactive"


class ScheduleCorruption(RuntimeError):
    pass


def classify_mode(kind: AlgorithmKind | str, node: int, k: int, sets: NodeSets) -> Mode:
    kind = AlgorithmKind(kind)
    if kind is AlgorithmKind.QAPOD:
        hits = [
            (Mode.DEPARTING, node in sets.departing),
            (Mode.DEPARTING_SOON, node in sets.departing_soon),
            (Mode.LONG_TERM_REMAINING, node in sets.long_term),
            (Mode.ARRIVING, node in sets.arriving),
        ]
        if node in sets.remaining and node not in sets.departing_soon | sets.long_term:
            raise ScheduleCorruption(f"step {k}: remaining node {node} is neither departing soon nor long-term")
    else:
        hits = [
            (Mode.ARRIVING, node in sets.arriving),
            (Mode.DEPARTING, node in sets.departing),
            (Mode.REMAINING, node in sets.remaining),
        ]
    modes = [m for m, hit in hits if hit]
    if len(modes) > 1:
        raise ScheduleCorruption(f"step {k}: node {node} is in several mode sets {modes}")
    return modes[0] if modes else Mode.INACTIVE


def _messages(sender: int, sends: Iterable[tuple[int, MassPair]], k: int, delay: int) -> list[TransmissionMessage]:
    return [TransmissionMessage(sender, to, m.y, m.z, k, k + delay) for to, m in sends]


def _split_and_send(
    node: NodeRecord, targets: Iterable[int], inbox: Sequence[MassPair], rng: IntRng, k: int, delay: int
) -> tuple[NodeRecord, list[TransmissionMessage]]:
    mass = node.mass
    if mass.z < 1:
        # nothing to snapshot or split; hold everything until tokens arrive
        return node.evolve(mass=merge_received(mass, inbox)), []
    state = StateTriple.from_mass(mass)
    probs = remaining_probabilities(targets, node.id)
    kept, sends = split_mass(mass, probs, node.id, rng)
    node2 = node.evolve(mass=merge_received(kept, inbox), state=state)
    return node2, _messages(node.id, sends, k, delay)


def step_remaining_qaod(
    node: NodeRecord,
    out_remaining: Iterable[int],
    inbox: Sequence[MassPair] = (),
    rng: IntRng | None = None,
    k: int = 0,
) -> tuple[NodeRecord, list[TransmissionMessage]]:
    return _split_and_send(node, out_remaining, inbox, rng, k, 0)


def _handoff(
    node: NodeRecord, payload: MassPair, qualifying: Iterable[int], rng: IntRng, k: int
) -> TransmissionMessage:
    try:
        probs = departing_probabilities(qualifying)
    except DepartureConditionViolated as exc:
        exc.node = node.id
        exc.payload = payload
        exc.step = k
        raise
    to = sample_target(probs, rng)
    return TransmissionMessage(node.id, to, payload.y, payload.z, k, k)


def step_departing_qaod(
    node: NodeRecord,
    out_remaining: Iterable[int],
    rng: IntRng,
    k: int = 0,
    inbox: Sequence[MassPair] = (),
) -> TransmissionMessage:
    """Hand off held mass minus the node's own initial tokens.

    Raises ``DepartureConditionViolated`` (carrying the lost ``payload``)
    when no remaining out-neighbor exists.
    """
    payload = departure_handoff_closed(merge_received(node.mass, inbox), node.x, node.r)
    return _handoff(node, payload, out_remaining, rng, k)


def step_arriving_qaod(node: NodeRecord, k: int = 0) -> NodeRecord:
    mass, state = arrival_init(node.x, node.r)
    return node.evolve(mass=mass, state=state, nu=k + 1)


def step_qapod(
    node: NodeRecord,
    mode: Mode,
    out_longterm: Iterable[int],
    inbox: Sequence[MassPair] = (),
    delay_draw: int = 0,
    rng: IntRng | None = None,
    k: int = 0,
) -> tuple[NodeRecord, list[TransmissionMessage]]:
    if mode is Mode.LONG_TERM_REMAINING:
        return _split_and_send(node, out_longterm, inbox, rng, k, delay_draw)
    if mode is Mode.DEPARTING_SOON:
        return node.evolve(mass=merge_received(node.mass, inbox)), []
    if mode is Mode.DEPARTING:
        # handoffs leave with zero delay: the sender is gone at k+1
        msg = step_departing_qaod(node, out_longterm, rng, k, inbox)
        return node.evolve(mass=ZERO), [msg]
    if mode is Mode.ARRIVING:
        return step_arriving_qaod(node, k), []
    raise ValueError(f"mode {mode} is not a delay-aware mode")


def step_qaiod(
    node: NodeRecord,
    mode: Mode,
    out_remaining: Iterable[int],
    inbox: Sequence[MassPair] = (),
    rng: IntRng | None = None,
    k: int = 0,
) -> tuple[NodeRecord, list[TransmissionMessage]]:
    if mode is Mode.REMAINING:
        if node.mass.z < 1:
            return node.evolve(mass=merge_received(node.mass, inbox), eta=0), []
        return _split_and_send(node.evolve(eta=0, nu=k), out_remaining, inbox, rng, k, 0)
    if mode is Mode.DEPARTING:
        payload = departure_handoff_open(merge_received(node.mass, inbox))
        # a node active only for its arrival step still counts as having participated
        node = node.evolve(eta=0)
        msg = _handoff(node, payload, out_remaining, rng, k)
        return node.evolve(mass=ZERO), [msg]
    if mode is Mode.ARRIVING:
        mass, state = arrival_init_open(node)
        nu = k + 1 if node.eta == 1 else node.nu
        return node.evolve(mass=mass, state=state, nu=nu), []
    raise ValueError(f"mode {mode} is not valid for the indefinitely-open variant")
