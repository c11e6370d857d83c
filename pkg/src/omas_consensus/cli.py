"""Command line entry point: batch runs, trace verification, graph checks.

    omas-consensus run --preset scenario1 --algorithm qaod --seeds 100 --out results/
    omas-consensus verify --trace results/traces/run_000.json
    omas-consensus graphcheck --trace results/traces/run_000.json
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import ALGORITHMS, PRESET_NAMES, ScenarioConfig, preset
from .engine import Trace, derive_seed, run
from .metrics import RunMetrics, Summary, aggregate, replay_audit, replay_epsilon
from .topology import (
    DepartureKnowledge,
    TopologyError,
    departure_condition_failures,
    is_strongly_connected,
    node_sets_at,
    union_digraph,
    verify_T_joint_connectivity,
)

log = logging.getLogger("omas_consensus")


def batch_seed(master_seed: int, index: int) -> int:
    """Seed of run ``index``; sha256-based so it is the same on every platform."""
    return derive_seed(master_seed, "run", index)


@dataclass
class BatchResult:
    config: ScenarioConfig
    seeds: list[int]
    runs: list[RunMetrics]
    summary: Summary

    @property
    def audit_failures(self) -> list[int]:
        """Seeds of conforming runs whose conservation audit failed somewhere."""
        return [
            m.seed for m in self.runs
            if m.conforming and not (all(m.audit_ok) and all(m.post_audit_ok))
        ]

    @property
    def violation_count(self) -> int:
        return sum(1 for m in self.runs if not m.conforming)

    def report(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "convergence": self.summary.convergence_stats(),
            "violating_runs": self.violation_count,
            "audit_failures": self.audit_failures,
            "runs": [
                {
                    "seed": m.seed,
                    "convergence_step": m.convergence_step,
                    "consensus_step": m.consensus_step,
                    "final_epsilon": m.epsilon_series[-1],
                    "violation_steps": m.violation_steps,
                    "first_conservation_break": m.first_conservation_break,
                    "first_audit_failure": m.first_audit_failure,
                }
                for m in self.runs
            ],
        }


def _one_run(args: tuple[ScenarioConfig, int, str | None]) -> RunMetrics:
    cfg, seed, trace_stem = args
    trace = run(cfg, seed=seed, record_nodes=trace_stem is not None)
    if trace_stem is not None:
        trace.write_json(trace_stem + ".json")
        trace.write_csv(trace_stem + ".csv")
    return RunMetrics.from_trace(trace)


def run_batch(
    cfg: ScenarioConfig,
    seeds: int | Sequence[int] | None = None,
    master_seed: int = 0,
    out_dir: str | Path | None = None,
    write_traces: bool | None = None,
    jobs: int = 1,
) -> BatchResult:
    """Run ``cfg.runs`` (or ``seeds``) simulations and write summaries to ``out_dir``."""
    if seeds is None:
        seeds = cfg.runs
    if isinstance(seeds, int):
        seeds = [batch_seed(master_seed, i) for i in range(seeds)]
    seeds = list(seeds)
    if not seeds:
        raise ValueError("no seeds to run")
    out = Path(out_dir) if out_dir is not None else (Path(cfg.out_dir) if cfg.out_dir else None)
    traces = cfg.write_traces if write_traces is None else write_traces
    if traces and out is None:
        raise ValueError("writing traces needs an output directory")
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            if traces:
                (out / "traces").mkdir(exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out}: {exc}") from exc
    tasks = [
        (cfg, s, str(out / "traces" / f"run_{i:03d}") if traces else None)
        for i, s in enumerate(seeds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_one_run, tasks))
    else:
        runs = [_one_run(t) for t in tasks]
    result = BatchResult(cfg, seeds, runs, aggregate(runs))
    if out is not None:
        csv_path, json_path = out / "summary.csv", out / "summary.json"
        try:
            result.summary.write_csv(csv_path)
            json_path.write_text(json.dumps(result.report(), indent=2, sort_keys=True))
        except OSError as exc:
            raise OSError(f"cannot write summary to {out}: {exc}") from exc
    return result


# --------------------------------------------------------------------------
# trace checks


def verify_trace(trace: Trace) -> dict:
    """Re-run the audit and the error metric from the raw trace contents."""
    if any(not rec.nodes for rec in trace.steps):
        raise ValueError("trace was recorded without node snapshots")
    audits = replay_audit(trace)
    eps = replay_epsilon(trace)
    recorded = RunMetrics.from_trace(trace)
    first_fail = next((k for k, ok in enumerate(audits) if not ok), None)
    return {
        "steps": len(trace.steps),
        "conforming": recorded.conforming,
        "violation_steps": recorded.violation_steps,
        "audit_ok": all(audits),
        "first_audit_failure": first_fail,
        "first_conservation_break": recorded.first_conservation_break,
        "audit_matches_record": audits == recorded.audit_ok,
        "epsilon_matches_record": eps == recorded.epsilon_series,
        "convergence_step": recorded.convergence_step,
    }


def graphcheck_trace(trace: Trace) -> dict:
    if trace.topology is None:
        raise ValueError("trace does not contain the topology sequence")
    sched, seq = trace.schedule, trace.topology
    mismatched = [k for k in range(sched.horizon) if seq.per_step[k].nodes != sched.active[k]]
    if trace.kind == "qapod":
        know = DepartureKnowledge.from_schedule(sched, trace.tau_bar)
        qualifying = [node_sets_at(sched, know, k).long_term for k in range(sched.horizon)]
    else:
        qualifying = [sched.remaining(k) for k in range(sched.horizon)]
    failures = departure_condition_failures(sched, seq, qualifying)
    out = {
        "node_sets_match": not mismatched,
        "mismatched_steps": mismatched,
        "departure_condition_ok": not failures,
        "departure_failures": [list(f) for f in failures],
    }
    ks = sched.stabilization_step
    cfg = trace.config or {}
    T = cfg.get("T")
    if ks is not None and seq.instances is not None:
        out["instances_union_strongly_connected"] = is_strongly_connected(union_digraph(seq.instances))
        if T is not None and ks + T <= sched.horizon:
            joint = verify_T_joint_connectivity(seq, ks, T, sched.horizon)
            if cfg.get("instance_schedule") == "round_robin":
                out["T_joint_connected"] = joint
            else:
                # i.i.d. draws only cover every instance eventually, not in every window
                out["T_windows_all_connected"] = int(joint)
    return out


# --------------------------------------------------------------------------
# argument parsing

_OVERRIDES = [
    # flag, config field, type
    ("--n-total", "n_total", int),
    ("--n-active-initial", "n_active_initial", int),
    ("--churn-rate", "churn_rate", float),
    ("--perturb-up-prob", "perturb_up_prob", float),
    ("--churn-start", "churn_start", int),
    ("--stabilization-step", "stabilization_step", int),
    ("--T", "T", int),
    ("--tau-bar", "tau_bar", int),
    ("--horizon", "horizon", int),
    ("--violate-step", "violate_step", int),
    ("--mean-out-degree", "mean_out_degree", float),
    ("--instance-out-degree", "instance_out_degree", float),
    ("--instance-schedule", "instance_schedule", str),
    ("--delay-distribution", "delay_distribution", str),
]


def build_config(args: argparse.Namespace) -> ScenarioConfig:
    """Preset or JSON file first, then explicit flags on top."""
    if args.config and args.preset:
        raise SystemExit("use either --config or --preset, not both")
    if args.config:
        try:
            base = ScenarioConfig.load(args.config).to_dict()
        except OSError as exc:
            raise SystemExit(f"cannot read config {args.config}: {exc}")
        if args.algorithm:
            base["algorithm"] = args.algorithm
    else:
        name = args.preset or "scenario1"
        base = preset(name, args.algorithm or "qaod", args.tau_bar).to_dict()
    for _flag, fld, _typ in _OVERRIDES:
        val = getattr(args, fld)
        if val is not None:
            base[fld] = val
    if args.violate:
        base["violate_departure_condition"] = True
    if args.seeds is not None:
        base["runs"] = args.seeds
    if args.out is not None:
        base["out_dir"] = args.out
    if args.write_traces:
        base["write_traces"] = True
    return ScenarioConfig.from_dict(base)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="omas-consensus", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a batch of seeded simulations")
    r.add_argument("--preset", choices=PRESET_NAMES)
    r.add_argument("--config", help="JSON file with ScenarioConfig fields")
    r.add_argument("--algorithm", choices=ALGORITHMS)
    r.add_argument("--seeds", type=int, help="number of runs")
    r.add_argument("--master-seed", type=int, default=0)
    r.add_argument("--out", help="output directory")
    r.add_argument("--write-traces", action="store_true")
    r.add_argument("--violate", action="store_true", help="break the departure condition once")
    r.add_argument("--jobs", type=int, default=1)
    for flag, fld, typ in _OVERRIDES:
        r.add_argument(flag, dest=fld, type=typ)

    v = sub.add_parser("verify", help="re-run the audits on a saved trace")
    v.add_argument("--trace", required=True)

    g = sub.add_parser("graphcheck", help="check connectivity conditions of a saved trace")
    g.add_argument("--trace", required=True)

    sub.add_parser("presets", help="list scenario presets")
    return ap


def _load_trace(path: str) -> Trace:
    try:
        return Trace.load(path)
    except OSError as exc:
        raise SystemExit(f"cannot read trace {path}: {exc}")


def main(argv: Sequence[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")

    if args.command == "presets":
        for name in PRESET_NAMES:
            print(name)
        return 0

    if args.command == "run":
        try:
            cfg = build_config(args)
        except (KeyError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        try:
            result = run_batch(cfg, master_seed=args.master_seed, jobs=args.jobs)
        except TopologyError as exc:
            print(f"error: cannot build a schedule for this configuration: {exc}", file=sys.stderr)
            return 2
        stats = result.summary.convergence_stats()
        log.info("%s %s: %d runs, converged %d, median step %s, mean step %s",
                 cfg.name, cfg.algorithm, stats["runs"], stats["converged"], stats["median"], stats["mean"])
        if result.violation_count:
            log.info("runs with departure-condition violations: %d", result.violation_count)
        if cfg.out_dir:
            log.info("summary written to %s", cfg.out_dir)
        if result.audit_failures:
            log.error("conservation audit failed for conforming seeds %s", result.audit_failures)
            return 1
        return 0

    trace = _load_trace(args.trace)
    if args.command == "verify":
        rep = verify_trace(trace)
        print(json.dumps(rep, indent=2, sort_keys=True))
        ok = rep["audit_matches_record"] and rep["epsilon_matches_record"]
        if rep["conforming"]:
            ok = ok and rep["audit_ok"]
        return 0 if ok else 1

    rep = graphcheck_trace(trace)
    print(json.dumps(rep, indent=2, sort_keys=True))
    bools = [v for v in rep.values() if isinstance(v, bool)]
    return 0 if all(bools) else 1


if __name__ == "__main__":
    sys.exit(main())
