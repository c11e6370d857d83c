"""Targets, the epsilon error, convergence detection and conservation audits.

All averages are exact ``Fraction`` values; floor/ceil comparisons happen
on the rationals themselves.
"""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

from .protocol import MassPair

if TYPE_CHECKING:
    from .engine import Trace


def active_average(x: Mapping[int, int], active: Iterable[int]) -> Fraction:
    members = list(active)
    if not members:
        raise ValueError("average over an empty active set")
    return Fraction(sum(x[v] for v in members), len(members))


def historical_average(x: Mapping[int, int], historical: Iterable[int]) -> Fraction:
    members = set(historical)
    if not members:
        raise ValueError("average over an empty historical set")
    return Fraction(sum(x[v] for v in members), len(members))


@dataclass
class HistoricalSet:
    """Every node active at least once so far, with a running sum of initial states."""

    members: set[int] = field(default_factory=set)
    x_sum: int = 0

    def extend(self, active: Iterable[int], x: Mapping[int, int]) -> None:
        for v in active:
            if v not in self.members:
                self.members.add(v)
                self.x_sum += x[v]

    def average(self) -> Fraction:
        if not self.members:
            raise ValueError("average over an empty historical set")
        return Fraction(self.x_sum, len(self.members))


def epsilon(masses: Iterable[MassPair], q_alg: Fraction) -> int:
    """Aggregate distance of node ratios ``y/z`` from the band around ``q_alg``.

    Nodes holding no tokens (``z < 1``) have no ratio and are skipped.
    """
    q_floor, q_ceil = math.floor(q_alg), math.ceil(q_alg)
    total = 0
    for m in masses:
        if m.z < 1:
            continue
        lo = m.y // m.z
        hi = -((-m.y) // m.z)
        if hi > q_ceil:
            total += hi - q_ceil
        if lo < q_floor:
            total += q_floor - lo
    return total


def check_consensus(q_values: Iterable[int], q_alg: Fraction) -> bool:
    band = {math.floor(q_alg), math.ceil(q_alg)}
    return all(q in band for q in q_values)


def audit_mass_conservation(
    masses: Iterable[MassPair],
    in_flight: Iterable[MassPair],
    expected_y: int,
    expected_z: int,
) -> bool:
    y = z = 0
    for m in masses:
        y += m.y
        z += m.z
    for m in in_flight:
        y += m.y
        z += m.z
    return y == expected_y and z == expected_z


def expected_sums(x: Mapping[int, int], population: Iterable[int]) -> tuple[int, int]:
    """``(2 * sum of x, 2 * count)`` over the population that owns the tokens."""
    members = list(population)
    return 2 * sum(x[v] for v in members), 2 * len(members)


def convergence_step(eps: "RunMetrics | Sequence[int]", window: int = 1) -> int | None:
    """First step from which epsilon stays zero to the end of the record.

    ``window`` is the minimum length the zero suffix must have.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    series = eps.epsilon_series if isinstance(eps, RunMetrics) else list(eps)
    k = len(series)
    while k > 0 and series[k - 1] == 0:
        k -= 1
    if len(series) - k < window:
        return None
    return k


@dataclass
class RunMetrics:
    epsilon_series: list[int]
    target_series: list[Fraction]
    n_active: list[int] = field(default_factory=list)
    consensus_series: list[bool] = field(default_factory=list)
    audit_ok: list[bool] = field(default_factory=list)
    violation_steps: list[int] = field(default_factory=list)
    seed: int | None = None
    post_audit_ok: list[bool] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.epsilon_series)

    @property
    def convergence_step(self) -> int | None:
        return convergence_step(self.epsilon_series)

    @property
    def consensus_step(self) -> int | None:
        """First step after which both epsilon and every state estimate stay in band."""
        ok = [e == 0 and c for e, c in zip(self.epsilon_series, self.consensus_series)]
        k = len(ok)
        while k > 0 and ok[k - 1]:
            k -= 1
        return k if k < len(ok) else None

    @property
    def first_audit_failure(self) -> int | None:
        return next((k for k, ok in enumerate(self.audit_ok) if not ok), None)

    @property
    def first_conservation_break(self) -> int | None:
        """First round whose outgoing masses no longer add up."""
        return next((k for k, ok in enumerate(self.post_audit_ok) if not ok), None)

    @property
    def conforming(self) -> bool:
        return not self.violation_steps

    @classmethod
    def from_trace(cls, trace: "Trace") -> "RunMetrics":
        steps = trace.steps
        return cls(
            epsilon_series=[s.epsilon for s in steps],
            target_series=[s.q_target for s in steps],
            n_active=[len(s.active) for s in steps],
            consensus_series=[s.consensus for s in steps],
            audit_ok=[s.audit_ok for s in steps],
            violation_steps=sorted({s.k for s in steps if s.violations}),
            seed=trace.seed,
            post_audit_ok=[s.post_audit_ok for s in steps],
        )


@dataclass
class Summary:
    horizon: int
    epsilon_mean: list[float]
    epsilon_min: list[int]
    epsilon_max: list[int]
    n_active_mean: list[float]
    q_target_mean: list[Fraction]
    convergence_steps: list[int | None]
    runs: int

    @property
    def converged(self) -> list[int]:
        return [c for c in self.convergence_steps if c is not None]

    def convergence_stats(self) -> dict:
        c = self.converged
        if not c:
            return {"converged": 0, "runs": self.runs, "min": None, "median": None, "max": None, "mean": None}
        return {
            "converged": len(c),
            "runs": self.runs,
            "min": min(c),
            "median": statistics.median(c),
            "max": max(c),
            "mean": statistics.fmean(c),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "epsilon_mean", "epsilon_min", "epsilon_max", "n_active", "q_target_num", "q_target_den"])
            for k in range(self.horizon):
                q = self.q_target_mean[k]
                w.writerow([k, repr(self.epsilon_mean[k]), self.epsilon_min[k], self.epsilon_max[k],
                            repr(self.n_active_mean[k]), q.numerator, q.denominator])


def aggregate(runs: Sequence[RunMetrics]) -> Summary:
    if not runs:
        raise ValueError("nothing to aggregate")
    horizon = runs[0].horizon
    if any(r.horizon != horizon for r in runs):
        raise ValueError("runs have different horizons")
    m = len(runs)
    eps_cols = list(zip(*(r.epsilon_series for r in runs)))
    return Summary(
        horizon=horizon,
        epsilon_mean=[float(Fraction(sum(col), m)) for col in eps_cols],
        epsilon_min=[min(col) for col in eps_cols],
        epsilon_max=[max(col) for col in eps_cols],
        n_active_mean=[float(Fraction(sum(col), m)) for col in zip(*(r.n_active for r in runs))] if runs[0].n_active else [0.0] * horizon,
        q_target_mean=[sum(col, Fraction(0)) / m for col in zip(*(r.target_series for r in runs))],
        convergence_steps=[r.convergence_step for r in runs],
        runs=m,
    )


# --------------------------------------------------------------------------
# independent replay of a saved trace


def replay_in_flight(trace: "Trace") -> list[MassPair]:
    """In-flight payload at the start of every step, rebuilt from the message log.

    A message is in flight at step ``k`` when it was emitted before ``k`` and
    is delivered at or after ``k``.
    """
    horizon = len(trace.steps)
    diff = [[0, 0] for _ in range(horizon + 2)]
    for rec in trace.steps:
        for msg in rec.emitted:
            lo, hi = msg.emit_step + 1, min(msg.deliver_step, horizon - 1)
            if lo > hi:
                continue
            diff[lo][0] += msg.c_y
            diff[lo][1] += msg.c_z
            diff[hi + 1][0] -= msg.c_y
            diff[hi + 1][1] -= msg.c_z
    out = []
    y = z = 0
    for k in range(horizon):
        y += diff[k][0]
        z += diff[k][1]
        out.append(MassPair(y, z))
    return out


def replay_audit(trace: "Trace") -> list[bool]:
    """Re-run the conservation audit from raw node masses and the message log."""
    x = trace.x
    in_flight = replay_in_flight(trace)
    history: set[int] = set()
    out = []
    for rec in trace.steps:
        history |= set(rec.active)
        population = history if trace.kind == "qaiod" else rec.active
        ey, ez = expected_sums(x, population)
        masses = [rec.nodes[v].mass for v in rec.active]
        out.append(audit_mass_conservation(masses, [in_flight[rec.k]], ey, ez))
    return out


def replay_epsilon(trace: "Trace") -> list[int]:
    x = trace.x
    history: set[int] = set()
    out = []
    for rec in trace.steps:
        history |= set(rec.active)
        q = historical_average(x, history) if trace.kind == "qaiod" else active_average(x, rec.active)
        out.append(epsilon((rec.nodes[v].mass for v in rec.active), q))
    return out
