"""Synchronous round loop with a processing-delay queue and full traces."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import algorithms as alg
from .algorithms import AlgorithmKind, Mode
from .config import ScenarioConfig
from .metrics import (
    HistoricalSet,
    active_average,
    audit_mass_conservation,
    check_consensus,
    epsilon,
    expected_sums,
)
from .protocol import ZERO, DepartureConditionViolated, MassPair, NodeRecord, StateTriple, TransmissionMessage
from .topology import (
    DepartureKnowledge,
    MembershipSchedule,
    TopologySequence,
    generate_membership_schedule,
    generate_topology_sequence,
    node_sets_at,
)

log = logging.getLogger(__name__)


class EngineError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# randomness


def derive_seed(master: int, label: str, index: int | None = None) -> int:
    """Stable 64-bit substream seed from ``(master, label, index)``."""
    key = f"{master}:{label}:{'' if index is None else index}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


@dataclass(frozen=True)
class RngStreams:
    seed: int

    def python(self, label: str, index: int | None = None) -> random.Random:
        return random.Random(derive_seed(self.seed, label, index))

    def numpy(self, label: str, index: int | None = None) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.seed, label, index))


def draw_processing_delay(tau_bar: int, rng: random.Random, distribution: str = "uniform") -> int:
    if tau_bar <= 0:
        return 0
    if distribution == "max":
        return tau_bar
    return rng.randrange(tau_bar + 1)


# --------------------------------------------------------------------------
# delay queue


@dataclass
class DelayQueue:
    pending: dict[int, list[TransmissionMessage]] = field(default_factory=lambda: defaultdict(list))

    def push(self, msg: TransmissionMessage) -> None:
        self.pending[msg.deliver_step].append(msg)

    def pop_due(self, k: int) -> list[TransmissionMessage]:
        return self.pending.pop(k, [])

    def messages(self) -> list[TransmissionMessage]:
        return [m for step in sorted(self.pending) for m in self.pending[step]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.pending.values())


def deliver_due(
    queue: DelayQueue, k: int, active: Iterable[int] | None = None
) -> tuple[dict[int, list[MassPair]], list[TransmissionMessage]]:
    """Remove messages due at ``k`` and group their payloads by receiver."""
    due = queue.pop_due(k)
    alive = None if active is None else set(active)
    inbox: dict[int, list[MassPair]] = {}
    for msg in due:
        if alive is not None and msg.receiver not in alive:
            raise EngineError(f"step {k}: message from {msg.sender} delivered to inactive node {msg.receiver}")
        inbox.setdefault(msg.receiver, []).append(msg.payload)
    return inbox, due


# --------------------------------------------------------------------------
# trace


@dataclass(frozen=True)
class NodeSnapshot:
    mass: MassPair
    state: StateTriple | None
    mode: str

    def to_list(self) -> list:
        s = self.state.to_list() if self.state else [None, None, None]
        return [self.mass.y, self.mass.z, *s, self.mode]

    @classmethod
    def from_list(cls, row: Sequence) -> "NodeSnapshot":
        y, z, ys, zs, qs, mode = row
        return cls(MassPair(y, z), None if ys is None else StateTriple(ys, zs, qs), mode)


@dataclass
class StepRecord:
    """State at step ``k``: masses before the round, state triples after the refresh."""

    k: int
    active: list[int]
    nodes: dict[int, NodeSnapshot]
    emitted: list[TransmissionMessage]
    delivered: list[TransmissionMessage]
    lost: list[tuple[int, MassPair]]
    node_sum: MassPair
    in_flight: MassPair
    expected: MassPair
    audit_ok: bool
    epsilon: int
    q_target: Fraction
    consensus: bool
    # conservation of the masses this round hands to step k + 1
    post_audit_ok: bool = True

    @property
    def violations(self) -> list[int]:
        return [v for v, _ in self.lost]

    def to_dict(self, with_nodes: bool = True) -> dict:
        d = {
            "k": self.k,
            "active": self.active,
            "emitted": [m.to_dict() for m in self.emitted],
            "delivered": [m.to_dict() for m in self.delivered],
            "lost": [[v, m.y, m.z] for v, m in self.lost],
            "node_sum": self.node_sum.to_list(),
            "in_flight": self.in_flight.to_list(),
            "expected": self.expected.to_list(),
            "audit_ok": self.audit_ok,
            "epsilon": self.epsilon,
            "q_target": [self.q_target.numerator, self.q_target.denominator],
            "consensus": self.consensus,
            "post_audit_ok": self.post_audit_ok,
        }
        if with_nodes:
            d["nodes"] = {str(v): s.to_list() for v, s in sorted(self.nodes.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "StepRecord":
        return cls(
            k=d["k"],
            active=list(d["active"]),
            nodes={int(v): NodeSnapshot.from_list(row) for v, row in d.get("nodes", {}).items()},
            emitted=[TransmissionMessage.from_dict(m) for m in d["emitted"]],
            delivered=[TransmissionMessage.from_dict(m) for m in d["delivered"]],
            lost=[(v, MassPair(y, z)) for v, y, z in d["lost"]],
            node_sum=MassPair(*d["node_sum"]),
            in_flight=MassPair(*d["in_flight"]),
            expected=MassPair(*d["expected"]),
            audit_ok=d["audit_ok"],
            epsilon=d["epsilon"],
            q_target=Fraction(*d["q_target"]),
            consensus=d["consensus"],
            post_audit_ok=d.get("post_audit_ok", True),
        )


@dataclass
class Trace:
    kind: str
    seed: int
    x: dict[int, int]
    schedule: MembershipSchedule
    topology: TopologySequence | None
    steps: list[StepRecord] = field(default_factory=list)
    tau_bar: int | dict[int, int] = 0
    config: dict | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "tau_bar": self.tau_bar if isinstance(self.tau_bar, int) else {str(k): v for k, v in sorted(self.tau_bar.items())},
            "config": self.config,
            "x": [self.x[v] for v in range(len(self.x))],
            "schedule": self.schedule.to_dict(),
            "topology": self.topology.to_dict() if self.topology is not None else None,
            "steps": [s.to_dict() for s in self.steps],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "Trace":
        tau = d.get("tau_bar", 0)
        return cls(
            kind=d["kind"],
            seed=d["seed"],
            x=dict(enumerate(d["x"])),
            schedule=MembershipSchedule.from_dict(d["schedule"]),
            topology=TopologySequence.from_dict(d["topology"]) if d.get("topology") else None,
            steps=[StepRecord.from_dict(s) for s in d["steps"]],
            tau_bar=tau if isinstance(tau, int) else {int(k): v for k, v in tau.items()},
            config=d.get("config"),
        )

    @classmethod
    def from_json(cls, text: str) -> "Trace":
        return cls.from_dict(json.loads(text))

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Trace":
        return cls.from_json(Path(path).read_text())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "n_active", "q_target", "epsilon", "sum_y", "sum_z", "violations"])
        for s in self.steps:
            total = s.node_sum + s.in_flight
            w.writerow([s.k, len(s.active), f"{s.q_target.numerator}/{s.q_target.denominator}",
                        s.epsilon, total.y, total.z, len(s.lost)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


# --------------------------------------------------------------------------
# the round loop


def _initial_records(x: Mapping[int, int], initial: Iterable[int]) -> dict[int, NodeRecord]:
    nodes = {v: NodeRecord(v, xv) for v, xv in x.items()}
    for v in initial:
        nodes[v] = alg.step_arriving_qaod(nodes[v], k=-1)
    return nodes


def simulate(
    kind: AlgorithmKind | str,
    x: Mapping[int, int] | Sequence[int],
    schedule: MembershipSchedule,
    topology: TopologySequence,
    *,
    seed: int = 0,
    tau_bar: int | Mapping[int, int] = 0,
    delay_distribution: str = "uniform",
    node_order: Callable[[Iterable[int]], Sequence[int]] = sorted,
    record_nodes: bool = True,
    keep_topology: bool = True,
    config: dict | None = None,
) -> Trace:
    """Run ``schedule.horizon`` rounds of one algorithm.

    Round ``k`` delivers due delayed messages, lets arrivals initialize for
    ``k + 1``, lets departing nodes hand off, lets remaining nodes snapshot,
    split and emit, then routes zero-delay messages and commits the masses
    for ``k + 1``. A departure without a qualifying out-neighbor is recorded
    as lost mass and the run continues.
    """
    kind = AlgorithmKind(kind)
    if not isinstance(x, Mapping):
        x = dict(enumerate(x))
    x = {int(v): int(xv) for v, xv in x.items()}
    if len(x) != schedule.n_total:
        raise EngineError("one initial state per potential node is required")
    if kind is not AlgorithmKind.QAPOD:
        taus = [tau_bar] if isinstance(tau_bar, int) else list(tau_bar.values())
        if any(t != 0 for t in taus):
            raise EngineError(f"{kind.value} assumes zero processing delay")
    topology.check_against(schedule)
    knowledge = DepartureKnowledge.from_schedule(schedule, tau_bar)
    streams = RngStreams(seed)
    split_rng = {v: streams.python("split", v) for v in x}
    delay_rng = {v: streams.python("delay", v) for v in x}

    nodes = _initial_records(x, schedule.active[0])
    queue = DelayQueue()
    history = HistoricalSet()
    trace = Trace(kind.value, seed, x, schedule, topology if keep_topology else None,
                  tau_bar=tau_bar if isinstance(tau_bar, int) else dict(tau_bar), config=config)

    for k in range(schedule.horizon):
        V = schedule.active[k]
        sets = node_sets_at(schedule, knowledge, k)
        history.extend(V, x)
        g = topology.per_step[k]

        start_mass = {v: nodes[v].mass for v in V}
        pending = queue.messages()
        in_flight = sum((m.payload for m in pending), ZERO)
        node_sum = sum(start_mass.values(), ZERO)
        if kind is AlgorithmKind.QAIOD:
            expected = MassPair(2 * history.x_sum, 2 * len(history.members))
            q_target = history.average()
        else:
            expected = MassPair(2 * sum(x[v] for v in V), 2 * len(V))
            q_target = active_average(x, V)
        audit_ok = audit_mass_conservation(start_mass.values(), [in_flight], expected.y, expected.z)
        eps = epsilon(start_mass.values(), q_target)

        early, delivered = deliver_due(queue, k, V)
        qualifying = sets.long_term if kind is AlgorithmKind.QAPOD else sets.remaining
        modes: dict[int, Mode] = {}
        emitted: list[TransmissionMessage] = []
        lost: list[tuple[int, MassPair]] = []

        for v in node_order(V):
            mode = alg.classify_mode(kind, v, k, sets)
            modes[v] = mode
            node = nodes[v]
            inbox = early.get(v, [])
            out = [w for w in g.out_neighbors(v) if w in qualifying]
            rng = split_rng[v]
            try:
                if kind is AlgorithmKind.QAOD:
                    if mode is Mode.DEPARTING:
                        msgs = [alg.step_departing_qaod(node, out, rng, k, inbox)]
                        node2 = node.evolve(mass=ZERO)
                    else:
                        node2, msgs = alg.step_remaining_qaod(node, out, inbox, rng, k)
                elif kind is AlgorithmKind.QAPOD:
                    delay = 0
                    if mode is Mode.LONG_TERM_REMAINING:
                        delay = draw_processing_delay(knowledge.tau_bar.get(v, 0), delay_rng[v], delay_distribution)
                    node2, msgs = alg.step_qapod(node, mode, out, inbox, delay, rng, k)
                else:
                    node2, msgs = alg.step_qaiod(node, mode, out, inbox, rng, k)
            except DepartureConditionViolated as exc:
                log.debug("step %d: node %d lost %s", k, v, exc.payload)
                lost.append((v, exc.payload))
                node2 = node.evolve(mass=ZERO, eta=0 if kind is AlgorithmKind.QAIOD else None)
                msgs = []
            nodes[v] = node2
            emitted.extend(msgs)

        for v in sorted(sets.arriving):
            modes[v] = Mode.ARRIVING
            if kind is AlgorithmKind.QAIOD:
                nodes[v], _ = alg.step_qaiod(nodes[v], Mode.ARRIVING, (), (), None, k)
            else:
                nodes[v] = alg.step_arriving_qaod(nodes[v], k)

        emitted.sort(key=lambda m: (m.sender, m.receiver))
        next_active = schedule.active[k + 1]
        for msg in emitted:
            if msg.deliver_step == k:
                if msg.receiver not in V or msg.receiver not in next_active or msg.receiver in sets.departing:
                    raise EngineError(f"step {k}: zero-delay message to {msg.receiver}, which cannot merge it")
                r = nodes[msg.receiver]
                nodes[msg.receiver] = r.evolve(mass=r.mass + msg.payload)
                delivered.append(msg)
            else:
                queue.push(msg)

        if kind is AlgorithmKind.QAIOD:
            population = history.members | next_active
        else:
            population = next_active
        post_ok = audit_mass_conservation(
            (nodes[v].mass for v in next_active),
            (m.payload for m in queue.messages()),
            *expected_sums(x, population),
        )

        q_values = [nodes[v].state.q_s for v in V if nodes[v].state is not None]
        consensus = len(q_values) == len(V) and check_consensus(q_values, q_target)
        snapshots = {}
        if record_nodes:
            snapshots = {v: NodeSnapshot(start_mass[v], nodes[v].state, modes[v].value) for v in V}
        trace.steps.append(StepRecord(
            k=k,
            active=sorted(V),
            nodes=snapshots,
            emitted=emitted,
            delivered=delivered,
            lost=lost,
            node_sum=node_sum,
            in_flight=in_flight,
            expected=expected,
            audit_ok=audit_ok,
            epsilon=eps,
            q_target=q_target,
            consensus=consensus,
            post_audit_ok=post_ok,
        ))
    return trace


def build_instance(cfg: ScenarioConfig, seed: int) -> tuple[dict[int, int], MembershipSchedule, TopologySequence]:
    """Initial states, membership schedule and topology for one seeded run."""
    streams = RngStreams(seed)
    init = streams.numpy("init")
    x = {v: int(xv) for v, xv in enumerate(init.integers(cfg.x_low, cfg.x_high + 1, size=cfg.n_total))}
    sched = generate_membership_schedule(cfg, streams.numpy("schedule"))
    topo = generate_topology_sequence(sched, cfg, streams.numpy("topology"))
    return x, sched, topo


def run(cfg: ScenarioConfig, kind: AlgorithmKind | str | None = None, seed: int = 0, **kwargs) -> Trace:
    if kind is not None and AlgorithmKind(kind).value != cfg.algorithm:
        cfg = cfg.replace(algorithm=AlgorithmKind(kind).value)
    x, sched, topo = build_instance(cfg, seed)
    return simulate(
        cfg.algorithm, x, sched, topo,
        seed=seed,
        tau_bar=cfg.tau_bar,
        delay_distribution=cfg.delay_distribution,
        config=cfg.to_dict(),
        **kwargs,
    )
