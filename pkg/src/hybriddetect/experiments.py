"""End-to-end trials: generate, train both classifiers, replay, report."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .forest import ForestModel, train_forest, undersample
from .harness import ModelScorers, RunResult, report, run_log
from .metrics import ExperimentReport
from .reconstruction import CompressedWindow, Vocabulary, build_vocabulary, emit_windows
from .slow_path import DeepMalwareConfig, DeepMalwareModel, train as train_deep
from .trace import GeneratorConfig, Label, TraceLog, concat_traces, generate_trace, label_map

log = logging.getLogger(__name__)


@dataclass
class TrainedModels:
    vocabulary: Vocabulary
    forest: ForestModel
    deep: DeepMalwareModel | None
    train_windows: int = 0
    loss_curve: list[float] = field(default_factory=list)


def make_windows(trace: TraceLog, labels: dict[int, Label], cfg: ExperimentConfig,
                 vocab: Vocabulary) -> list[CompressedWindow]:
    return list(emit_windows(trace, cfg.window_config, vocab, labels))


def deep_config(cfg: ExperimentConfig, vocab_size: int) -> DeepMalwareConfig:
    return DeepMalwareConfig(vocab_size=vocab_size, **dataclasses.asdict(cfg.deep))


def train_models(cfg: ExperimentConfig, traces: TraceLog | list[TraceLog],
                 labels: dict[int, Label], with_deep: bool = True) -> TrainedModels:
    """Vocabulary, forest and (optionally) DeepMalware from labelled traces.

    Windows are cut per trace, so each window's system-wide frequencies only
    see its own trace. Both classifiers train on the same class-balanced set.
    """
    traces = [traces] if isinstance(traces, TraceLog) else list(traces)
    vocab = build_vocabulary(traces, cfg.ngram)
    windows = [w for t in traces for w in make_windows(t, labels, cfg, vocab)]
    balanced = undersample(windows, cfg.forest.seed)
    forest = train_forest(balanced, vocab, cfg.forest, balance=False)
    deep = None
    curve: list[float] = []
    if with_deep:
        deep = DeepMalwareModel.init(deep_config(cfg, vocab.size), vocab)
        deep, curve = train_deep(deep, balanced, cfg.training)
    return TrainedModels(vocab, forest, deep, len(balanced), curve)


def trial_traces(gen: GeneratorConfig, seed: int, n_train_traces: int):
    """One training log (independent runs played back to back) and one test log.

    All runs are shaped like ``gen`` and share its behaviour (transition
    matrices) but not samples; training pids are offset per run.
    """
    base = dataclasses.replace(gen, behavior_seed=seed)
    n_proc = gen.n_benign + gen.n_malicious
    stride = 4 * max(n_proc, 1)
    runs, labels = [], {}
    for k in range(n_train_traces):
        cfg = dataclasses.replace(base, trace_seed=10_000 + 100 * seed + k,
                                  first_pid=gen.first_pid + (k + 1) * stride)
        tr, trl = generate_trace(cfg)
        runs.append(tr)
        labels.update(label_map(trl))
    te, tel = generate_trace(dataclasses.replace(base, trace_seed=20_000 + seed))
    return (concat_traces(runs), labels), (te, label_map(tel))


@dataclass
class CascadeTrial:
    seed: int
    reports: dict[str, ExperimentReport]
    runs: dict[str, RunResult]
    models: TrainedModels

    def f1(self, pipeline: str) -> float:
        return self.reports[pipeline].f1

    def cost(self, pipeline: str) -> float:
        return self.reports[pipeline].cost.total


def cascade_trial(cfg: ExperimentConfig, seed: int, n_train_traces: int = 10,
                  pipelines=("hybrid", "fast_only", "slow_only")) -> CascadeTrial:
    """Train on ``n_train_traces`` fresh traces, then replay one test trace per pipeline."""
    (tr, trl), (te, tel) = trial_traces(cfg.generator, seed, n_train_traces)
    cfg = cfg.replace(seed=seed, forest=dataclasses.replace(cfg.forest, seed=seed),
                      deep=dataclasses.replace(cfg.deep, seed=seed),
                      training=dataclasses.replace(cfg.training, seed=seed),
                      delay_seed=seed)
    need_deep = any(p != "fast_only" for p in pipelines)
    models = train_models(cfg, tr, trl, with_deep=need_deep)
    scorers = ModelScorers(models.forest, models.deep)
    reports, runs = {}, {}
    for pipeline in pipelines:
        pcfg = cfg.replace(pipeline=pipeline)
        run = run_log(pcfg, te, tel, scorers, models.vocabulary)
        runs[pipeline] = run
        reports[pipeline] = report(pcfg, run)
        log.info("seed %d %s: f1 %.3f cost %.0f", seed, pipeline,
                 reports[pipeline].f1, reports[pipeline].cost.total)
    return CascadeTrial(seed, reports, runs, models)


def window_accuracy(models: TrainedModels, windows: list[CompressedWindow]) -> dict[str, float]:
    """Held-out window accuracy of each classifier at threshold 0.5."""
    from .forest import window_features, window_targets
    from .slow_path import predict_batch

    y = window_targets(windows)
    out = {"fast": float(((models.forest.predict_proba(
        window_features(windows, models.vocabulary.size)) >= 0.5) == y).mean())}
    if models.deep is not None:
        out["slow"] = float(((predict_batch(models.deep, windows) >= 0.5) == y).mean())
    return out


def mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())
