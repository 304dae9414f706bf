"""Syscall events, trace logs, labels and a synthetic trace generator.

Trace files are UTF-8 text with one event per line and three tab-separated
decimal fields: ``timestamp_ms``, ``pid``, ``syscall_id``. Label files hold one
``pid<TAB>M`` or ``pid<TAB>B`` line per process.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

DEFAULT_ALPHABET_SIZE = 155


class ConfigError(ValueError):
    """Invalid experiment or generator configuration."""


class TraceParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class TraceOrderError(TraceParseError):
    pass


class Label(enum.Enum):
    MALICIOUS = "M"
    BENIGN = "B"

    @property
    def is_malicious(self) -> bool:
        return self is Label.MALICIOUS


class SyscallEvent(NamedTuple):
    timestamp: int
    pid: int
    syscall: int


class ProcessLabel(NamedTuple):
    pid: int
    label: Label


@dataclass(frozen=True)
class TraceLog:
    """Immutable, time-ordered sequence of syscall events."""

    events: tuple[SyscallEvent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(SyscallEvent(*e) for e in self.events))

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def pids(self) -> list[int]:
        """Distinct pids in order of first appearance."""
        return list(dict.fromkeys(e.pid for e in self.events))

    def by_pid(self) -> dict[int, list[SyscallEvent]]:
        out: dict[int, list[SyscallEvent]] = {}
        for e in self.events:
            out.setdefault(e.pid, []).append(e)
        return out

    def start_times(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.events:
            out.setdefault(e.pid, e.timestamp)
        return out

    def until(self, t_max: int) -> "TraceLog":
        """Events with timestamp <= t_max."""
        return TraceLog(tuple(e for e in self.events if e.timestamp <= t_max))


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic workload: first-order Markov syscall streams per process.

    ``separability`` blends a shared base transition matrix with a
    class-specific one: 0 gives both classes the same chain, 1 gives them
    disjoint high-probability supports. ``behavior_seed`` fixes the transition
    matrices; ``trace_seed`` (defaults to ``behavior_seed``) fixes sampling, so
    train and test traces can share behaviour while differing in samples.
    """

    alphabet_size: int = DEFAULT_ALPHABET_SIZE
    n_benign: int = 20
    n_malicious: int = 20
    events_per_process_mean: float = 600.0
    benign_rate_per_ms: float = 0.2
    malicious_rate_per_ms: float = 0.1
    behavior_seed: int = 0
    separability: float = 0.5
    trace_seed: int | None = None
    # class blend weight is separability ** separability_exponent
    separability_exponent: float = 4.0
    # successors per base row; each class tilts onto class_fanout of them
    base_fanout: int = 6
    class_fanout: int = 3
    # repeat-burst knob: chance per step of repeating the current syscall
    # for a geometric number of extra steps; makes run-length compression bite
    burst_prob: float = 0.08
    burst_mean_len: float = 2.0
    # malicious bursts are burst_contrast ** separability times longer and
    # proportionally rarer: same expected repeat mass, different run lengths
    burst_contrast: float = 6.0
    # process lengths are lognormal around the mean with this sigma
    length_sigma: float = 0.5
    start_spread_ms: int = 5_000
    first_pid: int = 100

    def validate(self) -> None:
        if self.alphabet_size < 2:
            raise ConfigError("alphabet_size must be >= 2")
        if self.n_benign < 0 or self.n_malicious < 0:
            raise ConfigError("process counts must be non-negative")
        if self.events_per_process_mean <= 0:
            raise ConfigError("events_per_process_mean must be positive")
        if self.benign_rate_per_ms <= 0 or self.malicious_rate_per_ms <= 0:
            raise ConfigError("event rates must be positive")
        if not 0.0 <= self.separability <= 1.0:
            raise ConfigError("separability must lie in [0, 1]")
        if self.class_fanout < 1 or self.base_fanout < 1:
            raise ConfigError("fanouts must be >= 1")
        if self.base_fanout > self.alphabet_size or 2 * self.class_fanout > self.base_fanout:
            raise ConfigError("need base_fanout <= alphabet_size and 2 * class_fanout <= base_fanout")
        if self.separability_exponent <= 0:
            raise ConfigError("separability_exponent must be positive")
        if not 0.0 <= self.burst_prob < 1.0 or self.burst_mean_len < 1.0 or self.burst_contrast < 1.0:
            raise ConfigError("invalid burst parameters")
        if self.start_spread_ms < 0 or self.first_pid < 1:
            raise ConfigError("invalid start spread or first pid")


def blend_weight(cfg: GeneratorConfig) -> float:
    return cfg.separability ** cfg.separability_exponent


def burst_params(cfg: GeneratorConfig, malicious: bool) -> tuple[float, float]:
    """(probability, mean extra length) of repeat bursts for a class."""
    if not malicious:
        return cfg.burst_prob, cfg.burst_mean_len
    f = cfg.burst_contrast ** cfg.separability
    return cfg.burst_prob / f, cfg.burst_mean_len * f


def transition_matrices(cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic (benign, malicious) transition matrices for ``cfg``.

    Each row of the shared base matrix has ``base_fanout`` successors. The
    class-specific rows split that support into two disjoint halves, benign
    mass on one and malicious mass on the other, so class evidence is a tilt
    of transition frequencies rather than a set of giveaway grams.
    """
    rng = np.random.default_rng([cfg.behavior_seed, 0x7A11])
    a = cfg.alphabet_size
    k = cfg.class_fanout
    base = np.zeros((a, a))
    benign = np.zeros((a, a))
    malicious = np.zeros((a, a))
    for row in range(a):
        succ = rng.choice(a, size=cfg.base_fanout, replace=False)
        base[row, succ] = rng.dirichlet(np.ones(cfg.base_fanout))
        benign[row, succ[:k]] = rng.dirichlet(np.ones(k))
        malicious[row, succ[k:2 * k]] = rng.dirichlet(np.ones(k))
    lam = blend_weight(cfg)
    return (1 - lam) * base + lam * benign, (1 - lam) * base + lam * malicious


def _sample_chain(rng: np.random.Generator, trans: np.ndarray, length: int,
                  burst_prob: float, burst_mean_len: float) -> np.ndarray:
    a = trans.shape[0]
    cum = np.cumsum(trans, axis=1)
    out = np.empty(length, dtype=np.int64)
    state = int(rng.integers(a))
    i = 0
    while i < length:
        out[i] = state
        i += 1
        if burst_prob and rng.random() < burst_prob:
            extra = int(rng.geometric(1.0 / burst_mean_len))
            stop = min(length, i + extra)
            out[i:stop] = state
            i = stop
        state = min(int(np.searchsorted(cum[state], rng.random(), side="right")), a - 1)
    return out


def generate_trace(cfg: GeneratorConfig) -> tuple[TraceLog, list[ProcessLabel]]:
    """Sample an interleaved, time-sorted trace and its ground-truth labels."""
    cfg.validate()
    n_proc = cfg.n_benign + cfg.n_malicious
    if n_proc == 0:
        return TraceLog(), []
    benign_t, malicious_t = transition_matrices(cfg)
    seed = cfg.behavior_seed if cfg.trace_seed is None else cfg.trace_seed
    rng = np.random.default_rng([seed, 0x5EED])

    kinds = [Label.BENIGN] * cfg.n_benign + [Label.MALICIOUS] * cfg.n_malicious
    kinds = [kinds[i] for i in rng.permutation(n_proc)]
    labels: list[ProcessLabel] = []
    columns = []
    for k, label in enumerate(kinds):
        pid = cfg.first_pid + 4 * k
        labels.append(ProcessLabel(pid, label))
        malicious = label.is_malicious
        length = max(2, int(round(cfg.events_per_process_mean
                                  * rng.lognormal(0.0, cfg.length_sigma)
                                  * np.exp(-cfg.length_sigma ** 2 / 2))))
        calls = _sample_chain(rng, malicious_t if malicious else benign_t, length,
                              *burst_params(cfg, malicious))
        rate = cfg.malicious_rate_per_ms if malicious else cfg.benign_rate_per_ms
        start = rng.uniform(0, cfg.start_spread_ms) if cfg.start_spread_ms else 0.0
        times = np.floor(start + np.cumsum(rng.exponential(1.0 / rate, size=length))).astype(np.int64)
        columns.append((times, np.full(length, pid, dtype=np.int64), calls))

    times = np.concatenate([c[0] for c in columns])
    pids = np.concatenate([c[1] for c in columns])
    calls = np.concatenate([c[2] for c in columns])
    seq = np.arange(len(times))
    order = np.lexsort((seq, pids, times))
    events = tuple(SyscallEvent(int(t), int(p), int(s))
                   for t, p, s in zip(times[order], pids[order], calls[order]))
    return TraceLog(events), labels


def concat_traces(logs: Iterable[TraceLog], gap_ms: int = 1_000) -> TraceLog:
    """Play logs one after another, each starting ``gap_ms`` after the previous ends.

    Pids must be disjoint across logs. Every window of a process lies inside
    its own segment, so system-wide frequencies never mix segments.
    """
    events: list[SyscallEvent] = []
    seen: set[int] = set()
    offset = 0
    for lg in logs:
        if not lg.events:
            continue
        pids = set(lg.pids())
        if pids & seen:
            raise ValueError(f"pids appear in more than one log: {sorted(pids & seen)[:5]}")
        seen |= pids
        shift = offset - lg.events[0].timestamp
        events.extend(SyscallEvent(e.timestamp + shift, e.pid, e.syscall) for e in lg.events)
        offset = events[-1].timestamp + gap_ms
    return TraceLog(tuple(events))


def read_trace(source: str | Iterable[str]) -> TraceLog:
    """Parse trace text (or an iterable of lines); validates time ordering."""
    lines = source.splitlines() if isinstance(source, str) else source
    events = []
    last = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise TraceParseError(lineno, f"expected 3 tab-separated fields, got {len(fields)}")
        try:
            t, pid, sc = (int(f) for f in fields)
        except ValueError:
            raise TraceParseError(lineno, f"non-integer field in {line!r}") from None
        if t < 0 or pid < 1 or sc < 0:
            raise TraceParseError(lineno, "timestamp and syscall must be >= 0, pid >= 1")
        if last is not None and t < last:
            raise TraceOrderError(lineno, f"timestamp {t} precedes {last}")
        last = t
        events.append(SyscallEvent(t, pid, sc))
    return TraceLog(tuple(events))


def write_trace(log: TraceLog) -> str:
    return "\n".join(f"{e.timestamp}\t{e.pid}\t{e.syscall}" for e in log.events)


def read_labels(source: str | Iterable[str]) -> list[ProcessLabel]:
    lines = source.splitlines() if isinstance(source, str) else source
    out = []
    seen = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            pid_s, tag = line.split("\t")
            pid = int(pid_s)
            label = Label(tag)
        except ValueError:
            raise TraceParseError(lineno, f"bad label line {line!r}") from None
        if pid in seen:
            raise TraceParseError(lineno, f"duplicate label for pid {pid}")
        seen.add(pid)
        out.append(ProcessLabel(pid, label))
    return out


def write_labels(labels: Iterable[ProcessLabel]) -> str:
    return "\n".join(f"{pl.pid}\t{pl.label.value}" for pl in labels)


def label_map(labels: Iterable[ProcessLabel]) -> dict[int, Label]:
    return {pl.pid: pl.label for pl in labels}
