"""Sweep the random-digraph degree knobs and report mean convergence per algorithm.

Convergence speed at a given scale depends on how dense the random digraphs
are, before and after stabilization. This script is how the defaults were
picked.

Usage:
    python3 scripts/degree_sweep.py --preset scenario1 --seeds 16
"""

import argparse
import itertools
import statistics

from omas_consensus.cli import batch_seed
from omas_consensus.config import PRESET_NAMES, preset
from omas_consensus.engine import run
from omas_consensus.metrics import RunMetrics

VARIANTS = [("qaod", None), ("qapod", 5), ("qapod", 10), ("qaiod", None)]


def mean_steps(cfg, seeds) -> float:
    steps = []
    for s in seeds:
        k = RunMetrics.from_trace(run(cfg, seed=s, record_nodes=False)).convergence_step
        steps.append(cfg.horizon if k is None else k)
    return statistics.fmean(steps)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--preset", choices=PRESET_NAMES, default="scenario1")
    ap.add_argument("--seeds", type=int, default=16)
    ap.add_argument("--mean-degrees", type=float, nargs="+", default=[4.0, 8.0])
    ap.add_argument("--instance-degrees", type=float, nargs="+", default=[8.0, 12.0])
    args = ap.parse_args()

    seeds = [batch_seed(0, i) for i in range(args.seeds)]
    print("mean_degree,instance_degree," + ",".join(a if t is None else f"{a}{t}" for a, t in VARIANTS))
    for md, idg in itertools.product(args.mean_degrees, args.instance_degrees):
        means = [
            mean_steps(preset(args.preset, alg, tau).replace(mean_out_degree=md, instance_out_degree=idg), seeds)
            for alg, tau in VARIANTS
        ]
        print(f"{md},{idg}," + ",".join(f"{m:.1f}" for m in means), flush=True)


if __name__ == "__main__":
    main()
