"""Hybrid vs single-classifier pipelines over several seeds.

    python scripts/cascade_benefit.py --seeds 0 1 2 3 4 --separability 0.6 --out cascade.json
"""

import argparse
import json
import time

from hybriddetect.config import ExperimentConfig
from hybriddetect.experiments import cascade_trial, mean_std
from hybriddetect.trace import GeneratorConfig

PIPELINES = ("hybrid", "fast_only", "slow_only")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--separability", type=float, default=0.6)
    ap.add_argument("--train-traces", type=int, default=10)
    ap.add_argument("--out", default=None, help="optional JSON summary path")
    args = ap.parse_args()

    cfg = ExperimentConfig(generator=GeneratorConfig(separability=args.separability))
    rows = {p: [] for p in PIPELINES}
    t0 = time.perf_counter()
    for seed in args.seeds:
        trial = cascade_trial(cfg, seed, n_train_traces=args.train_traces)
        for p in PIPELINES:
            r = trial.reports[p]
            rows[p].append({"seed": seed, "f1": r.f1, "fp_rate": r.fp_rate, "cost": r.cost.total,
                            "move_percentage": r.move_percentage,
                            "mean_detection_ms": r.detection_time["mean"]})
            print(f"seed {seed} {p:9s} f1 {r.f1:.3f} fp {r.fp_rate:.3f} "
                  f"cost {r.cost.total:8.0f} move {r.move_percentage:.2f}", flush=True)
    summary = {}
    for p in PIPELINES:
        f1, f1_sd = mean_std([r["f1"] for r in rows[p]])
        cost, _ = mean_std([r["cost"] for r in rows[p]])
        summary[p] = {"f1_mean": f1, "f1_std": f1_sd, "cost_mean": cost, "runs": rows[p]}
        print(f"{p:9s} mean f1 {f1:.3f} +/- {f1_sd:.3f}  mean cost {cost:.0f}")
    gain = summary["hybrid"]["f1_mean"] - summary["fast_only"]["f1_mean"]
    ratio = summary["hybrid"]["cost_mean"] / summary["slow_only"]["cost_mean"]
    print(f"hybrid gain over fast path {100 * gain:+.1f} points, cost {100 * ratio:.0f}% of slow path, "
          f"{time.perf_counter() - t0:.0f}s")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"separability": args.separability, "pipelines": summary,
                       "f1_gain": gain, "cost_ratio": ratio}, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
