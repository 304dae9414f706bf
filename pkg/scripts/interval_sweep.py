"""Borderline interval width vs move percentage, F1 and cost for the hybrid pipeline.

    python scripts/interval_sweep.py --seed 0 --mode online
"""

import argparse
import json

from hybriddetect.config import ExperimentConfig
from hybriddetect.experiments import train_models, trial_traces
from hybriddetect.harness import ModelScorers, report, run_log
from hybriddetect.trace import GeneratorConfig

INTERVALS = [(0.4, 0.6), (0.3, 0.7), (0.2, 0.8), (0.1, 0.9)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--separability", type=float, default=0.6)
    ap.add_argument("--train-traces", type=int, default=10)
    ap.add_argument("--mode", choices=["offline", "online"], default="online")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = ExperimentConfig(generator=GeneratorConfig(separability=args.separability),
                           mode=args.mode, seed=args.seed)
    (tr, trl), (te, tel) = trial_traces(cfg.generator, args.seed, args.train_traces)
    models = train_models(cfg, tr, trl)
    # one scorer for the whole sweep, so every interval sees the same probabilities
    scorers = ModelScorers(models.forest, models.deep)
    out = []
    for lo, hi in INTERVALS:
        rcfg = cfg.replace(lower=lo, upper=hi)
        r = report(rcfg, run_log(rcfg, te, tel, scorers, models.vocabulary))
        out.append({"lower": lo, "upper": hi, "move_percentage": r.move_percentage, "f1": r.f1,
                    "fp_rate": r.fp_rate, "cost": r.cost.total})
        print(f"[{lo:.1f}, {hi:.1f}] move {100 * r.move_percentage:5.1f}%  f1 {r.f1:.3f}  "
              f"fp {r.fp_rate:.3f}  cost {r.cost.total:.0f}", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
