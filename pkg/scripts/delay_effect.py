"""Effect of the delay mechanism on escalated processes in online replay.

Compares delays off against several sleep probabilities: how many events the
borderline processes manage to issue within the replay duration, and how
detection quality and latency move.

    python scripts/delay_effect.py --seed 0 --taus 0.05 0.1 0.3
"""

import argparse
import json

from hybriddetect.config import ExperimentConfig
from hybriddetect.experiments import train_models, trial_traces
from hybriddetect.harness import ModelScorers, report, run_log
from hybriddetect.router import Action
from hybriddetect.trace import GeneratorConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--separability", type=float, default=0.6)
    ap.add_argument("--train-traces", type=int, default=10)
    ap.add_argument("--taus", type=float, nargs="+", default=[0.05, 0.1, 0.3])
    ap.add_argument("--sleep-ms", type=int, default=50)
    ap.add_argument("--duration-ms", type=int, default=300_000)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = ExperimentConfig(generator=GeneratorConfig(separability=args.separability),
                           mode="online", duration_ms=args.duration_ms, seed=args.seed,
                           delay_sleep_ms=args.sleep_ms, delay_seed=args.seed)
    (tr, trl), (te, tel) = trial_traces(cfg.generator, args.seed, args.train_traces)
    models = train_models(cfg, tr, trl)
    scorers = ModelScorers(models.forest, models.deep)
    settings = [("off", cfg.replace(delay=False))]
    settings += [(f"tau={t}", cfg.replace(delay=True, delay_threshold=t)) for t in args.taus]
    out = []
    for name, rcfg in settings:
        res = run_log(rcfg, te, tel, scorers, models.vocabulary)
        r = report(rcfg, res)
        escalated = {v.pid for v in res.verdicts if v.action is Action.ESCALATE}
        events = sum(e.pid in escalated for e in res.replayed)
        row = {"setting": name, "delays_applied": res.delays_applied,
               "escalated_processes": len(escalated), "escalated_events": events,
               "f1": r.f1, "mean_detection_ms": r.detection_time["mean"]}
        out.append(row)
        det = row["mean_detection_ms"]
        print(f"{name:9s} delays {res.delays_applied:6d}  escalated {len(escalated):3d} "
              f"issuing {events:7d} events  f1 {r.f1:.3f}  "
              f"detection {'n/a' if det is None else f'{det:.0f} ms'}", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
