"""Virtual-clock replay of a trace through the detection pipeline.

Both engines route each process's windows strictly in order: a process has
at most one window under classification at a time, and windows that complete
meanwhile wait in a per-process queue. Routing decisions for a process are
therefore a function of its window sequence alone, and the clock only decides
when they happen.

Online, three kinds of happenings share one priority queue, ordered by
virtual time and, on ties, slow-path completions before fast-path completions
before syscall arrivals. Each classifier is a single FIFO server with a fixed
per-window cost. A kill ends the process's event stream at the kill instant.
A process in the borderline set has its targeted syscalls delayed. Event
arrivals stop at the experiment duration, but queued classifications drain
afterwards, so detection can land past the end of the run.

Offline, the windows of the whole (duration-cut) log are routed at their end
times with zero classification latency and no delays.
"""

from __future__ import annotations

import heapq
import logging
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .config import ExperimentConfig
from .delay import maybe_delay
from .forest import ForestModel, predict_window
from .metrics import CostSummary, ExperimentReport, compute_metrics
from .reconstruction import CompressedWindow, Vocabulary, WindowEmitter, WindowStats, emit_windows
from .router import Action, Router, Source, Verdict
from .slow_path import DeepMalwareModel, predict as dl_predict
from .trace import ConfigError, Label, SyscallEvent, TraceLog

log = logging.getLogger(__name__)

Scorer = Callable[[CompressedWindow], float]

_SLOW_DONE, _FAST_DONE, _ARRIVAL = 0, 1, 2


class ModelScorers:
    """Fast and slow scorers backed by trained models, memoised per window."""

    def __init__(self, forest: ForestModel | None, deep: DeepMalwareModel | None):
        self.forest = forest
        self.deep = deep
        self._fast: dict = {}
        self._slow: dict = {}

    @property
    def vocabulary(self) -> Vocabulary | None:
        for m in (self.forest, self.deep):
            if m is not None and m.vocabulary is not None:
                return m.vocabulary
        return None

    @staticmethod
    def _key(w: CompressedWindow):
        return w.ngram_seq, w.density_seq, w.sys_freq.tobytes()

    def fast(self, w: CompressedWindow) -> float:
        if self.forest is None:
            raise ConfigError("pipeline needs a fast-path model")
        # the forest reads only the window's own grams
        key = (w.ngram_seq, w.density_seq)
        if key not in self._fast:
            self._fast[key] = predict_window(self.forest, w)
        return self._fast[key]

    def slow(self, w: CompressedWindow) -> float:
        if self.deep is None:
            raise ConfigError("pipeline needs a slow-path model")
        key = self._key(w)
        if key not in self._slow:
            self._slow[key] = dl_predict(self.deep, w)
        return self._slow[key]


@dataclass
class RunResult:
    verdicts: list[Verdict]
    labels: dict[int, Label]
    start_times: dict[int, int]
    stats: WindowStats
    cost: CostSummary
    # online only: events in the order they were replayed, with delayed times
    replayed: list[SyscallEvent] = field(default_factory=list)
    borderline_timeline: dict[int, list[tuple[float, float]]] = field(default_factory=dict)
    delays_applied: int = 0


def _make_router(cfg: ExperimentConfig) -> Router:
    return Router(cfg.interval, cfg.max_roundtrips, cfg.observe_only, cfg.slow_threshold)


class _Pipeline:
    """Routing of one window at a time, shared by both engines."""

    def __init__(self, cfg: ExperimentConfig, fast: Scorer, slow: Scorer):
        self.cfg = cfg
        self.fast = fast
        self.slow = slow
        self.router = _make_router(cfg)
        self.cost = CostSummary(fast_cost_ms=cfg.fast_cost_ms, slow_cost_ms=cfg.slow_cost_ms)

    def first_stage(self) -> Source:
        return Source.SLOW if self.cfg.pipeline == "slow_only" else Source.FAST

    def classify(self, source: Source, w: CompressedWindow, t: float) -> Verdict:
        """Score ``w`` on ``source`` and apply the routing decision at time ``t``."""
        r = self.router
        if source is Source.FAST:
            self.cost.fast_calls += 1
            p = self.fast(w)
            if self.cfg.pipeline == "fast_only":
                return r.final(w.pid, w.window_index, p, t, Source.FAST, self.cfg.fast_only_threshold)
            return r.fast(w.pid, w.window_index, p, t)
        self.cost.slow_calls += 1
        p = self.slow(w)
        if self.cfg.pipeline == "slow_only":
            return r.final(w.pid, w.window_index, p, t, Source.SLOW, self.cfg.slow_threshold)
        return r.slow(w.pid, w.window_index, p, t)


def run_offline_log(cfg: ExperimentConfig, trace: TraceLog, labels: Mapping[int, Label],
                    fast: Scorer, slow: Scorer, vocab: Vocabulary) -> RunResult:
    if cfg.duration is not None:
        trace = trace.until(cfg.duration)
    pipe = _Pipeline(cfg, fast, slow)
    stats = WindowStats()
    verdicts = []
    for w in emit_windows(trace, cfg.window_config, vocab, dict(labels), stats):
        if not pipe.router.active(w.pid):
            continue
        v = pipe.classify(pipe.first_stage(), w, float(w.end_time))
        verdicts.append(v)
        if v.action is Action.ESCALATE:
            verdicts.append(pipe.classify(Source.SLOW, w, float(w.end_time)))
    return RunResult(verdicts, dict(labels), trace.start_times(), stats, pipe.cost)


class _OnlineEngine:
    def __init__(self, cfg: ExperimentConfig, trace: TraceLog, labels: Mapping[int, Label],
                 fast: Scorer, slow: Scorer, vocab: Vocabulary):
        self.cfg = cfg
        self.pipe = _Pipeline(cfg, fast, slow)
        self.router = self.pipe.router
        self.emitter = WindowEmitter(cfg.window_config, vocab, dict(labels))
        self.labels = dict(labels)
        self.streams = trace.by_pid()
        self.start_times = trace.start_times()
        self.policy = cfg.delay_policy
        self.delay_on = cfg.delay and not self.policy.is_null
        self.heap: list = []
        self.seq = 0
        self.pos = {pid: 0 for pid in self.streams}
        self.shift = {pid: 0 for pid in self.streams}
        self.rngs = {pid: self.policy.rng(pid) for pid in self.streams}
        self.held: dict[int, deque] = {pid: deque() for pid in self.streams}
        self.busy: set[int] = set()
        self.killed: set[int] = set()
        self.server_free = {Source.FAST: float("-inf"), Source.SLOW: float("-inf")}
        self.arrivals_left = 0
        self.verdicts: list[Verdict] = []
        self.replayed: list[SyscallEvent] = []
        self.timeline: dict[int, list[list[float]]] = {}
        self.delays_applied = 0

    def _push(self, t, kind, payload):
        heapq.heappush(self.heap, (t, kind, self.seq, payload))
        self.seq += 1

    def _schedule_next(self, pid):
        i = self.pos[pid]
        events = self.streams[pid]
        if i >= len(events) or pid in self.killed:
            return
        t = events[i].timestamp + self.shift[pid]
        if self.cfg.duration is not None and t > self.cfg.duration:
            return
        self.arrivals_left += 1
        self._push(t, _ARRIVAL, (pid, False))

    def run(self) -> RunResult:
        for pid in self.streams:
            self._schedule_next(pid)
        if self.arrivals_left == 0:
            self._release(self.emitter.flush(), 0.0)
        while self.heap:
            t, kind, _, payload = heapq.heappop(self.heap)
            if kind == _ARRIVAL:
                self._arrival(t, *payload)
            else:
                self._completion(t, Source.SLOW if kind == _SLOW_DONE else Source.FAST, payload)
        stats = WindowStats(
            windows=sum(self.emitter.windows_emitted(p) for p in self.streams),
            unfilled_pids=[p for p in self.streams if self.emitter.windows_emitted(p) == 0],
        )
        timeline = {pid: [(a, b) for a, b in spans] for pid, spans in self.timeline.items()}
        return RunResult(self.verdicts, self.labels, self.start_times, stats, self.pipe.cost,
                         self.replayed, timeline, self.delays_applied)

    def _arrival(self, t, pid, drawn):
        self.arrivals_left -= 1
        if pid in self.killed:
            self._maybe_flush(t)
            return
        e = self.streams[pid][self.pos[pid]]
        if not drawn and self.delay_on and pid in self.router.state.borderline_pids:
            d = maybe_delay(e, self.router.state.borderline_pids, self.policy, self.rngs[pid])
            if d:
                self.shift[pid] += d
                self.delays_applied += 1
                self.arrivals_left += 1
                self._push(t + d, _ARRIVAL, (pid, True))
                return
        ev = SyscallEvent(int(t), pid, e.syscall)
        self.replayed.append(ev)
        released = self.emitter.push(ev)
        self.pos[pid] += 1
        self._schedule_next(pid)
        self._release(released, t)
        self._maybe_flush(t)

    def _maybe_flush(self, t):
        if self.arrivals_left == 0:
            self._release(self.emitter.flush(), t)

    def _release(self, windows, t):
        for w in windows:
            if w.pid in self.killed or not self.router.active(w.pid):
                continue
            self.held[w.pid].append(w)
            self._dispatch(w.pid, t)

    def _dispatch(self, pid, t):
        if pid in self.busy or not self.held[pid]:
            return
        w = self.held[pid].popleft()
        self._start(self.pipe.first_stage(), w, t)

    def _start(self, source: Source, w, t):
        cost = self.cfg.fast_cost_ms if source is Source.FAST else self.cfg.slow_cost_ms
        begin = max(t, self.server_free[source])
        done = begin + cost
        self.server_free[source] = done
        self.busy.add(w.pid)
        self._push(done, _SLOW_DONE if source is Source.SLOW else _FAST_DONE, w)

    def _completion(self, t, source: Source, w):
        v = self.pipe.classify(source, w, t)
        self.verdicts.append(v)
        pid = w.pid
        if v.action is Action.ESCALATE:
            self.timeline.setdefault(pid, []).append([t, float("inf")])
            self._start(Source.SLOW, w, t)
            return
        if source is Source.SLOW and self.cfg.pipeline == "hybrid":
            self.timeline[pid][-1][1] = t
        self.busy.discard(pid)
        if v.action is Action.KILL and not self.cfg.observe_only:
            self._kill(pid)
        elif self.router.active(pid):
            self._dispatch(pid, t)
        else:
            self.held[pid].clear()

    def _kill(self, pid):
        self.killed.add(pid)
        self.held[pid].clear()
        self.emitter.drop(pid)


def run_online_log(cfg: ExperimentConfig, trace: TraceLog, labels: Mapping[int, Label],
                   fast: Scorer, slow: Scorer, vocab: Vocabulary) -> RunResult:
    return _OnlineEngine(cfg, trace, labels, fast, slow, vocab).run()


def report(cfg: ExperimentConfig, result: RunResult) -> ExperimentReport:
    meta = {"mode": cfg.mode, "pipeline": cfg.pipeline, "duration_ms": cfg.duration_ms,
            "interval": [cfg.lower, cfg.upper], "delay": cfg.delay and cfg.mode == "online",
            "observe_only": cfg.observe_only, "seed": cfg.seed,
            "delays_applied": result.delays_applied}
    return compute_metrics(result.verdicts, result.labels, sorted(result.start_times),
                           result.start_times, result.stats.unfilled_window_count,
                           result.cost, meta)


def run_log(cfg: ExperimentConfig, trace: TraceLog, labels: Mapping[int, Label],
            scorers: ModelScorers, vocab: Vocabulary | None = None) -> RunResult:
    vocab = vocab or scorers.vocabulary
    if vocab is None:
        raise ConfigError("no vocabulary: models must carry the training vocabulary")
    run = run_online_log if cfg.mode == "online" else run_offline_log
    return run(cfg, trace, labels, scorers.fast, scorers.slow, vocab)


def load_scorers(cfg: ExperimentConfig) -> ModelScorers:
    need_fast = cfg.pipeline in ("hybrid", "fast_only")
    need_slow = cfg.pipeline in ("hybrid", "slow_only")
    forest = deep = None
    if need_fast:
        if not os.path.exists(cfg.fast_model):
            raise ConfigError(f"fast-path model not found: {cfg.fast_model}")
        forest = ForestModel.load(cfg.fast_model)
    if need_slow:
        if not os.path.exists(cfg.slow_model):
            raise ConfigError(f"slow-path model not found: {cfg.slow_model}")
        deep = DeepMalwareModel.load(cfg.slow_model)
    return ModelScorers(forest, deep)


def run_offline(cfg: ExperimentConfig, trace: TraceLog, labels: Mapping[int, Label],
                scorers: ModelScorers | None = None) -> ExperimentReport:
    cfg = cfg.replace(mode="offline")
    scorers = scorers or load_scorers(cfg)
    return report(cfg, run_log(cfg, trace, labels, scorers))


def run_online(cfg: ExperimentConfig, trace: TraceLog, labels: Mapping[int, Label],
               scorers: ModelScorers | None = None) -> ExperimentReport:
    cfg = cfg.replace(mode="online")
    scorers = scorers or load_scorers(cfg)
    return report(cfg, run_log(cfg, trace, labels, scorers))
