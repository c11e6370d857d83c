"""Dynamic open digraphs: membership schedules, per-step topologies, validators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from .config import ScenarioConfig

Edge = tuple[int, int]


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Digraph:
    """Directed graph; an edge ``(a, b)`` means ``a`` can transmit to ``b``."""

    nodes: frozenset[int]
    edges: frozenset[Edge] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", frozenset(self.nodes))
        object.__setattr__(self, "edges", frozenset(self.edges))
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-loop on {a} is implicit and must not be stored")
            if a not in self.nodes or b not in self.nodes:
                raise ValueError(f"edge ({a}, {b}) has an endpoint outside the node set")

    @cached_property
    def out_adj(self) -> dict[int, tuple[int, ...]]:
        adj: dict[int, list[int]] = {v: [] for v in self.nodes}
        for a, b in self.edges:
            adj[a].append(b)
        return {v: tuple(sorted(ns)) for v, ns in adj.items()}

    @cached_property
    def in_adj(self) -> dict[int, tuple[int, ...]]:
        adj: dict[int, list[int]] = {v: [] for v in self.nodes}
        for a, b in self.edges:
            adj[b].append(a)
        return {v: tuple(sorted(ns)) for v, ns in adj.items()}

    def out_neighbors(self, v: int) -> tuple[int, ...]:
        return self.out_adj.get(v, ())

    def to_dict(self) -> dict:
        return {"nodes": sorted(self.nodes), "edges": sorted([a, b] for a, b in self.edges)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Digraph":
        return cls(frozenset(d["nodes"]), frozenset((a, b) for a, b in d["edges"]))


def _reach(start: int, adj: Mapping[int, Sequence[int]]) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen


def is_strongly_connected(g: Digraph) -> bool:
    if len(g.nodes) <= 1:
        return True
    root = min(g.nodes)
    n = len(g.nodes)
    return len(_reach(root, g.out_adj)) == n and len(_reach(root, g.in_adj)) == n


def union_digraph(gs: Sequence[Digraph]) -> Digraph:
    if not gs:
        raise ValueError("union of an empty sequence of digraphs")
    nodes: set[int] = set()
    edges: set[Edge] = set()
    for g in gs:
        nodes |= g.nodes
        edges |= g.edges
    return Digraph(frozenset(nodes), frozenset(edges))


# --------------------------------------------------------------------------
# membership


@dataclass(frozen=True)
class MembershipSchedule:
    """Active sets ``V[0..horizon]``; rounds run for ``k < horizon``."""

    n_total: int
    active: tuple[frozenset[int], ...]
    stabilization_step: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "active", tuple(frozenset(a) for a in self.active))
        if not self.active:
            raise ValueError("schedule needs at least one step")
        for k, a in enumerate(self.active):
            if any(v < 0 or v >= self.n_total for v in a):
                raise ValueError(f"step {k}: node id outside [0, {self.n_total})")
        ks = self.stabilization_step
        if ks is not None:
            if not 0 <= ks < len(self.active):
                raise ValueError("stabilization step outside the schedule")
            if any(self.active[k] != self.active[ks] for k in range(ks, len(self.active))):
                raise ValueError("active set changes after the stabilization step")

    @property
    def horizon(self) -> int:
        return len(self.active) - 1

    def remaining(self, k: int) -> frozenset[int]:
        return self.active[k] & self.active[k + 1]

    def arriving(self, k: int) -> frozenset[int]:
        return self.active[k + 1] - self.active[k]

    def departing(self, k: int) -> frozenset[int]:
        return self.active[k] - self.active[k + 1]

    def historical(self, k: int) -> frozenset[int]:
        out: set[int] = set()
        for t in range(k + 1):
            out |= self.active[t]
        return frozenset(out)

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "stabilization_step": self.stabilization_step,
            "active": [sorted(a) for a in self.active],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MembershipSchedule":
        return cls(d["n_total"], tuple(frozenset(a) for a in d["active"]), d.get("stabilization_step"))


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def churn_count(rate: float, n_active: int) -> int:
    return _round_half_up(Fraction(str(rate)) * n_active)


def generate_membership_schedule(cfg: "ScenarioConfig", rng: np.random.Generator) -> MembershipSchedule:
    """Random churn: a fixed fraction departs, a perturbed fraction arrives.

    Departures are ``round(rate * n[k])`` nodes drawn uniformly from the
    active set. Arrivals start from the same count, move up by one with
    probability ``perturb_up_prob`` and down by one otherwise; if the
    inactive pool is smaller than the base count, the whole pool joins.
    Churn runs for ``churn_start <= k < stabilization_step``.
    """
    n, n0 = cfg.n_total, cfg.n_active_initial
    if n0 > n:
        raise ValueError(f"initial active count {n0} exceeds node count {n}")
    if n0 < 1:
        raise ValueError("need at least one initially active node")
    everyone = np.arange(n)
    v0 = frozenset(int(v) for v in rng.choice(everyone, size=n0, replace=False))
    active = [v0]
    ks = cfg.stabilization_step
    for k in range(cfg.horizon):
        cur = active[-1]
        churning = k >= cfg.churn_start and (ks is None or k < ks)
        if not churning or cfg.churn_rate == 0:
            active.append(cur)
            continue
        base = churn_count(cfg.churn_rate, len(cur))
        cur_sorted = np.array(sorted(cur))
        pool = np.array(sorted(set(range(n)) - cur))
        n_dep = min(base, len(cur_sorted))
        departing = set(int(v) for v in rng.choice(cur_sorted, size=n_dep, replace=False)) if n_dep else set()
        if len(pool) < base:
            n_arr = len(pool)
        else:
            n_arr = base + 1 if rng.random() < cfg.perturb_up_prob else base - 1
            n_arr = max(0, min(n_arr, len(pool)))
        arriving = set(int(v) for v in rng.choice(pool, size=n_arr, replace=False)) if n_arr else set()
        active.append(frozenset((cur - departing) | arriving))
    return MembershipSchedule(n, tuple(active), ks)


# --------------------------------------------------------------------------
# departure knowledge and node sets


@dataclass(frozen=True)
class DepartureKnowledge:
    """Exact knowledge of future departures plus per-node maximum delays.

    A node's departure step at ``k`` is the first ``s >= k`` with the node in
    ``D[s]``; the knowledge window collapses to ``[s - k, s - k + 1]``.
    """

    departures: Mapping[int, tuple[int, ...]]
    tau_bar: Mapping[int, int]

    @classmethod
    def from_schedule(cls, sched: MembershipSchedule, tau_bar: int | Mapping[int, int] = 0) -> "DepartureKnowledge":
        deps: dict[int, list[int]] = {v: [] for v in range(sched.n_total)}
        for k in range(sched.horizon):
            for v in sched.departing(k):
                deps[v].append(k)
        if isinstance(tau_bar, Mapping):
            taus = {v: int(tau_bar.get(v, 0)) for v in range(sched.n_total)}
        else:
            taus = {v: int(tau_bar) for v in range(sched.n_total)}
        return cls({v: tuple(s) for v, s in deps.items()}, taus)

    def next_departure(self, v: int, k: int) -> int | None:
        for s in self.departures.get(v, ()):
            if s >= k:
                return s
        return None

    def window(self, v: int, k: int) -> tuple[int, int] | None:
        """``(rho_lower, rho_upper)`` or None when no departure is scheduled."""
        s = self.next_departure(v, k)
        if s is None:
            return None
        return s - k, s - k + 1


@dataclass(frozen=True)
class NodeSets:
    remaining: frozenset[int]
    arriving: frozenset[int]
    departing: frozenset[int]
    departing_soon: frozenset[int]
    long_term: frozenset[int]


def node_sets_at(
    sched: MembershipSchedule,
    knowledge: DepartureKnowledge | None,
    k: int,
    delay_bounds: Mapping[int, int] | None = None,
) -> NodeSets:
    if not 0 <= k < sched.horizon:
        raise IndexError(f"step {k} outside [0, {sched.horizon})")
    V = sched.active[k]
    R = sched.remaining(k)
    A = sched.arriving(k)
    D = sched.departing(k)
    if knowledge is None:
        knowledge = DepartureKnowledge.from_schedule(sched)
    taus = delay_bounds if delay_bounds is not None else knowledge.tau_bar
    if not any(taus.get(v, 0) for v in R):
        # without delays every remaining node already has its next departure beyond k + 1
        return NodeSets(R, A, D, frozenset(), R)
    soon: set[int] = set()
    long_term: set[int] = set()
    for v in R:
        w = knowledge.window(v, k)
        tau = taus.get(v, 0)
        if w is None:
            long_term.add(v)
            continue
        rho_l, rho_u = w
        if rho_l <= tau:
            soon.add(v)
            continue
        # rho_l > tau: not departing anywhere in {k+2, ..., k+rho_l-1}
        s = knowledge.next_departure(v, k + 2)
        if s is None or s >= k + rho_l:
            long_term.add(v)
    assert soon | long_term <= V
    return NodeSets(R, A, D, frozenset(soon), frozenset(long_term))


# --------------------------------------------------------------------------
# topology sequences


@dataclass(frozen=True)
class TopologySequence:
    per_step: tuple[Digraph, ...]
    instances: tuple[Digraph, ...] | None = None
    instance_probs: tuple[Fraction, ...] | None = None
    instance_index: tuple[int | None, ...] | None = None

    def __post_init__(self) -> None:
        if self.instance_probs is not None:
            if any(p <= 0 for p in self.instance_probs):
                raise ValueError("instance probabilities must be positive")
            if sum(self.instance_probs) != 1:
                raise ValueError("instance probabilities must sum to 1")
            if self.instances is None or len(self.instances) != len(self.instance_probs):
                raise ValueError("one probability per instance")

    def check_against(self, sched: MembershipSchedule) -> None:
        if len(self.per_step) < sched.horizon:
            raise TopologyError("topology shorter than the schedule horizon")
        for k in range(sched.horizon):
            if self.per_step[k].nodes != sched.active[k]:
                raise TopologyError(f"step {k}: digraph nodes differ from the active set")

    def to_dict(self) -> dict:
        out: dict = {"per_step": [g.to_dict() for g in self.per_step]}
        if self.instances is not None:
            out["instances"] = [g.to_dict() for g in self.instances]
            out["instance_probs"] = [[p.numerator, p.denominator] for p in self.instance_probs]
            out["instance_index"] = list(self.instance_index) if self.instance_index else None
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "TopologySequence":
        inst = d.get("instances")
        return cls(
            tuple(Digraph.from_dict(g) for g in d["per_step"]),
            tuple(Digraph.from_dict(g) for g in inst) if inst is not None else None,
            tuple(Fraction(a, b) for a, b in d["instance_probs"]) if inst is not None else None,
            tuple(d["instance_index"]) if d.get("instance_index") else None,
        )


def _edge_prob(mean_degree: float, m: int) -> float:
    return 0.0 if m <= 1 else min(1.0, mean_degree / (m - 1))


def random_digraph(nodes: Sequence[int], mean_degree: float, rng: np.random.Generator) -> np.ndarray:
    """Erdos-Renyi adjacency (row = sender) over ``nodes`` without self-loops."""
    m = len(nodes)
    adj = rng.random((m, m)) < _edge_prob(mean_degree, m)
    np.fill_diagonal(adj, False)
    return adj


def _to_digraph(nodes: Sequence[int], adj: np.ndarray) -> Digraph:
    rows, cols = np.nonzero(adj)
    return Digraph(frozenset(nodes), frozenset((nodes[i], nodes[j]) for i, j in zip(rows.tolist(), cols.tolist())))


def _rational_choice(probs: Sequence[Fraction], rng: np.random.Generator) -> int:
    denom = math.lcm(*(p.denominator for p in probs))
    u = int(rng.integers(denom))
    acc = 0
    for i, p in enumerate(probs):
        acc += p.numerator * (denom // p.denominator)
        if u < acc:
            return i
    raise AssertionError("unreachable")


def qualifying_sets(cfg: "ScenarioConfig", sched: MembershipSchedule) -> list[frozenset[int]]:
    """Per-step set a departing node must reach: R[k], or R'[k] for the delay-aware variant."""
    if cfg.algorithm == "qapod":
        know = DepartureKnowledge.from_schedule(sched, cfg.tau_bar)
        return [node_sets_at(sched, know, k).long_term for k in range(sched.horizon)]
    return [sched.remaining(k) for k in range(sched.horizon)]


def generate_stable_instances(
    nodes: Sequence[int], T: int, mean_degree: float, rng: np.random.Generator, max_attempts: int = 1000
) -> tuple[Digraph, ...]:
    for _ in range(max_attempts):
        inst = tuple(_to_digraph(nodes, random_digraph(nodes, mean_degree, rng)) for _ in range(T))
        if is_strongly_connected(union_digraph(inst)):
            return inst
    raise TopologyError(f"no strongly connected instance set found in {max_attempts} attempts")


def generate_topology_sequence(
    sched: MembershipSchedule, cfg: "ScenarioConfig", rng: np.random.Generator
) -> TopologySequence:
    """Random digraphs before stabilization, i.i.d. instance draws afterwards.

    Before the stabilization step every departing node is guaranteed an
    out-neighbor in the qualifying set by resampling its out-edges. With
    ``cfg.violate_departure_condition`` one step instead strips those edges
    from every departing node.
    """
    qualifying = qualifying_sets(cfg, sched)
    ks = sched.stabilization_step
    violate_at = None
    if cfg.violate_departure_condition:
        candidates = [k for k in range(sched.horizon) if sched.departing(k)]
        if cfg.violate_step is not None:
            candidates = [k for k in candidates if k >= cfg.violate_step]
        if not candidates:
            raise TopologyError("violation requested but no step has departures")
        violate_at = candidates[0]

    instances = probs = None
    if ks is not None and ks < sched.horizon:
        vr = sorted(sched.active[ks])
        instances = generate_stable_instances(vr, cfg.T, cfg.instance_out_degree, rng)
        probs = tuple(Fraction(1, cfg.T) for _ in range(cfg.T))

    per_step: list[Digraph] = []
    index: list[int | None] = []
    for k in range(sched.horizon):
        if ks is not None and k >= ks:
            if cfg.instance_schedule == "round_robin":
                theta = (k - ks) % cfg.T
            else:
                theta = _rational_choice(probs, rng)
            per_step.append(instances[theta])
            index.append(theta)
            continue
        nodes = sorted(sched.active[k])
        pos = {v: i for i, v in enumerate(nodes)}
        adj = random_digraph(nodes, cfg.mean_out_degree, rng)
        departing = sorted(sched.departing(k))
        qual = qualifying[k]
        if departing and not qual:
            raise TopologyError(f"step {k}: {len(departing)} departing nodes but nobody qualifies to receive")
        qmask = np.zeros(len(nodes), dtype=bool)
        qmask[[pos[v] for v in qual]] = True
        p = _edge_prob(cfg.mean_out_degree, len(nodes))
        for v in departing:
            i = pos[v]
            if k == violate_at:
                adj[i] &= ~qmask
                continue
            attempts = 0
            while not (adj[i] & qmask).any():
                attempts += 1
                if attempts > cfg.max_attempts:
                    raise TopologyError(f"step {k}: could not give node {v} a qualifying out-neighbor")
                adj[i] = rng.random(len(nodes)) < max(p, 1.0 / max(1, len(nodes) - 1))
                adj[i, i] = False
        per_step.append(_to_digraph(nodes, adj))
        index.append(None)
    return TopologySequence(tuple(per_step), instances, probs, tuple(index) if instances else None)


# --------------------------------------------------------------------------
# validators


def verify_T_joint_connectivity(seq: TopologySequence, from_step: int, T: int, horizon: int | None = None) -> bool:
    """Every length-``T`` window starting at or after ``from_step`` has a strongly connected union."""
    end = len(seq.per_step) if horizon is None else horizon
    if T < 1 or from_step + T > end:
        raise ValueError("window does not fit inside the horizon")
    node_set = seq.per_step[from_step].nodes
    for k in range(from_step, end):
        if seq.per_step[k].nodes != node_set:
            raise ValueError(f"step {k}: node set differs from step {from_step}")
    for start in range(from_step, end - T + 1):
        if not is_strongly_connected(union_digraph(seq.per_step[start : start + T])):
            return False
    return True


def all_possible_edges(seq: TopologySequence) -> frozenset[Edge]:
    out: set[Edge] = set()
    for g in seq.per_step:
        out |= g.edges
    return frozenset(out)


def verify_open_Tprime_connectivity(
    sched: MembershipSchedule,
    seq: TopologySequence,
    k: int,
    L: int,
    T_prime: int,
    possible_edges: Iterable[Edge] | None = None,
) -> bool:
    """Windowed union over ever-active nodes is strongly connected and complete.

    ``I`` is every node active somewhere in ``{k..k+L}``; ``Q`` every possible
    edge among ``I``. Passes iff ``(I, Q)`` is strongly connected and the
    topologies over ``{k..k+T_prime}`` cover exactly ``I`` and ``Q``.
    """
    if T_prime < L:
        raise ValueError("T' must be at least L'")
    if k < 0 or k + T_prime >= len(seq.per_step) or k + T_prime > sched.horizon:
        raise ValueError("window exceeds the horizon")
    if possible_edges is None:
        possible_edges = all_possible_edges(seq)
    I_L = frozenset().union(*(sched.active[t] for t in range(k, k + L + 1)))
    Q = frozenset((a, b) for a, b in possible_edges if a in I_L and b in I_L)
    if not is_strongly_connected(Digraph(I_L, Q)):
        return False
    I_T = frozenset().union(*(sched.active[t] for t in range(k, k + T_prime + 1)))
    seen = frozenset().union(*(seq.per_step[t].edges for t in range(k, k + T_prime + 1)))
    return I_T == I_L and seen == Q


def departure_condition_failures(
    sched: MembershipSchedule, seq: TopologySequence, qualifying: Sequence[frozenset[int]]
) -> list[tuple[int, int]]:
    """``(step, node)`` pairs where a departing node cannot reach the qualifying set."""
    out = []
    for k in range(sched.horizon):
        g = seq.per_step[k]
        for v in sorted(sched.departing(k)):
            if not set(g.out_neighbors(v)) & qualifying[k]:
                out.append((k, v))
    return out
