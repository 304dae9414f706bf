"""Command line: generate, train-fast, train-slow, replay, report.

Every command reads one flat config file (see README). Relative paths in the
config are resolved against the config file's directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .config import ExperimentConfig, load_config
from .experiments import deep_config, make_windows
from .forest import train_forest, undersample
from .harness import load_scorers, report, run_log
from .metrics import CostSummary, compute_metrics
from .reconstruction import WindowStats, build_vocabulary
from .router import Source, dump_verdicts, load_verdicts
from .slow_path import DeepMalwareModel, train as train_deep
from .trace import (ConfigError, TraceParseError, concat_traces, generate_trace, label_map,
                    read_labels, read_trace, write_labels, write_trace)

log = logging.getLogger("hybriddetect")

OUTPUT_KEYS = ("verdict_log", "report_json", "process_csv", "run_summary")


def _paths(cfg: ExperimentConfig, base: str) -> ExperimentConfig:
    def res(p):
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p))
    keys = ("trace", "labels", "train_trace", "train_labels", "fast_model", "slow_model",
            *OUTPUT_KEYS)
    return cfg.replace(**{k: res(getattr(cfg, k)) for k in keys})


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _read_text(path: str) -> str:
    with open(path) as fh:
        return fh.read()


def _load_pair(trace_path: str, labels_path: str):
    return read_trace(_read_text(trace_path)), label_map(read_labels(_read_text(labels_path)))


def cmd_generate(cfg: ExperimentConfig, args) -> None:
    """Test trace from the generator config, plus ``train_traces`` training runs."""
    gen = cfg.generator
    log_, labels = generate_trace(gen)
    _write(cfg.trace, write_trace(log_) + "\n")
    _write(cfg.labels, write_labels(labels) + "\n")
    runs, train_labels = [], []
    stride = 4 * max(gen.n_benign + gen.n_malicious, 1)
    test_seed = gen.behavior_seed if gen.trace_seed is None else gen.trace_seed
    for k in range(cfg.train_traces):
        run_cfg = dataclasses.replace(gen, trace_seed=test_seed + 1 + k,
                                      first_pid=gen.first_pid + (k + 1) * stride)
        tr, trl = generate_trace(run_cfg)
        runs.append(tr)
        train_labels.extend(trl)
    if runs:
        _write(cfg.train_trace, write_trace(concat_traces(runs)) + "\n")
        _write(cfg.train_labels, write_labels(train_labels) + "\n")
    print(f"wrote {cfg.trace} ({len(log_)} events) and {cfg.train_trace} "
          f"({sum(len(r) for r in runs)} events)")


def _training_windows(cfg: ExperimentConfig):
    trace, labels = _load_pair(cfg.train_trace, cfg.train_labels)
    vocab = build_vocabulary(trace, cfg.ngram)
    windows = undersample(make_windows(trace, labels, cfg, vocab), cfg.forest.seed)
    return vocab, windows


def cmd_train_fast(cfg: ExperimentConfig, args) -> None:
    vocab, windows = _training_windows(cfg)
    model = train_forest(windows, vocab, cfg.forest, balance=False)
    _write(cfg.fast_model, model.dumps())
    print(f"trained forest on {len(windows)} windows -> {cfg.fast_model}")


def cmd_train_slow(cfg: ExperimentConfig, args) -> None:
    vocab, windows = _training_windows(cfg)
    model = DeepMalwareModel.init(deep_config(cfg, vocab.size), vocab)
    model, curve = train_deep(model, windows, cfg.training)
    os.makedirs(os.path.dirname(cfg.slow_model) or ".", exist_ok=True)
    model.save(cfg.slow_model)
    print(f"trained DeepMalware on {len(windows)} windows, final loss {curve[-1]:.4f} "
          f"-> {cfg.slow_model}")


def _write_report(cfg: ExperimentConfig, rep) -> None:
    _write(cfg.report_json, rep.dumps())
    _write(cfg.process_csv, rep.process_csv())


def cmd_replay(cfg: ExperimentConfig, args) -> None:
    if args.mode:
        cfg = cfg.replace(mode=args.mode)
    if args.pipeline:
        cfg = cfg.replace(pipeline=args.pipeline)
    trace, labels = _load_pair(cfg.trace, cfg.labels)
    scorers = load_scorers(cfg)
    result = run_log(cfg, trace, labels, scorers)
    _write(cfg.verdict_log, dump_verdicts(result.verdicts))
    summary = {"mode": cfg.mode, "pipeline": cfg.pipeline,
               "unfilled_pids": result.stats.unfilled_pids,
               "windows_filled": result.stats.windows,
               "delays_applied": result.delays_applied}
    _write(cfg.run_summary, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    rep = report(cfg, result)
    _write_report(cfg, rep)
    print(f"{cfg.mode}/{cfg.pipeline}: f1 {rep.f1:.4f} accuracy {rep.accuracy:.4f} "
          f"fp_rate {rep.fp_rate:.4f} move {rep.move_percentage:.4f} -> {cfg.report_json}")


def cmd_report(cfg: ExperimentConfig, args) -> None:
    """Recompute the report from a verdict log (plus the replay's run summary)."""
    trace, labels = _load_pair(cfg.trace, cfg.labels)
    verdicts = load_verdicts(_read_text(cfg.verdict_log))
    summary = json.loads(_read_text(cfg.run_summary)) if os.path.exists(cfg.run_summary) else {}
    mode = summary.get("mode", cfg.mode)
    cfg = cfg.replace(mode=mode, pipeline=summary.get("pipeline", cfg.pipeline))
    cost = CostSummary(sum(v.source is Source.FAST for v in verdicts),
                       sum(v.source is Source.SLOW for v in verdicts),
                       cfg.fast_cost_ms, cfg.slow_cost_ms)
    if cfg.duration is not None and mode == "offline":
        trace = trace.until(cfg.duration)
    stats = WindowStats(summary.get("windows_filled", 0), summary.get("unfilled_pids", []))
    meta = {"mode": cfg.mode, "pipeline": cfg.pipeline, "duration_ms": cfg.duration_ms,
            "interval": [cfg.lower, cfg.upper], "delay": cfg.delay and cfg.mode == "online",
            "observe_only": cfg.observe_only, "seed": cfg.seed,
            "delays_applied": summary.get("delays_applied", 0)}
    rep = compute_metrics(verdicts, labels, sorted(trace.start_times()), trace.start_times(),
                          stats.unfilled_window_count, cost, meta)
    _write_report(cfg, rep)
    print(f"report -> {cfg.report_json}, {cfg.process_csv}")


COMMANDS = {
    "generate": cmd_generate,
    "train-fast": cmd_train_fast,
    "train-slow": cmd_train_slow,
    "replay": cmd_replay,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybriddetect", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="flat key = value config file")
        if name == "replay":
            sp.add_argument("--mode", choices=("offline", "online"))
            sp.add_argument("--pipeline", choices=("hybrid", "fast_only", "slow_only"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        cfg = _paths(cfg, os.path.dirname(os.path.abspath(args.config)))
        COMMANDS[args.command](cfg, args)
    except (ConfigError, TraceParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
