"""Per-pid n-gram encoding, run-length compression and sliding windows.

A window covers ``W`` raw n-gram units of one process; consecutive windows of a
process start ``S`` units apart. Each emitted window carries three streams:
the run-length compressed n-gram sequence, the matching density (run length)
sequence, and a system-wide n-gram frequency vector over the window's time
span.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .trace import ConfigError, Label, SyscallEvent, TraceLog

Gram = tuple[int, ...]

UNKNOWN_INDEX = 0

WINDOW_PRESETS = ((100, 50), (200, 100), (500, 250))


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = 100
    stride: int = 50
    n: int = 2
    # normalised sys_freq (sum 1) unless raw counts are requested
    raw_counts: bool = False
    exclude_self: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("gram order n must be >= 1")
        if self.stride < 1 or self.window_size < self.stride:
            raise ConfigError("need stride >= 1 and window_size >= stride")


def encode_ngrams(calls: Sequence[int], n: int = 2) -> list[Gram]:
    """Overlapping stride-1 grams; empty when fewer than ``n`` calls."""
    calls = list(calls)
    return [tuple(calls[i:i + n]) for i in range(len(calls) - n + 1)]


def compress(grams: Sequence) -> tuple[list, list[int]]:
    """Maximal run-length encoding into (units, densities)."""
    units: list = []
    dens: list[int] = []
    for g in grams:
        if units and units[-1] == g:
            dens[-1] += 1
        else:
            units.append(g)
            dens.append(1)
    return units, dens


def decompress(units: Sequence, densities: Sequence[int]) -> list:
    out: list = []
    for u, d in zip(units, densities):
        out.extend([u] * int(d))
    return out


class Vocabulary:
    """Gram -> dense index; index 0 is reserved for grams unseen in training."""

    def __init__(self, units: Iterable[Gram] = ()):
        self._index: dict[Gram, int] = {}
        for u in units:
            u = tuple(u)
            if u not in self._index:
                self._index[u] = len(self._index) + 1

    @property
    def size(self) -> int:
        return len(self._index) + 1

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.units() == other.units()

    def __contains__(self, gram) -> bool:
        return tuple(gram) in self._index

    def index(self, gram: Gram) -> int:
        return self._index.get(tuple(gram), UNKNOWN_INDEX)

    def units(self) -> list[Gram]:
        """Known grams in index order (index 1 first)."""
        return list(self._index)

    def to_json(self) -> list[list[int]]:
        return [list(u) for u in self._index]

    @classmethod
    def from_json(cls, data) -> "Vocabulary":
        return cls(tuple(u) for u in data)


def build_vocabulary(source, n: int = 2) -> Vocabulary:
    """Vocabulary over grams in first-occurrence order.

    ``source`` is a TraceLog (or list of them), or an iterable of gram lists.
    """
    if isinstance(source, TraceLog):
        source = [source]
    units: list[Gram] = []
    for item in source:
        if isinstance(item, TraceLog):
            for events in item.by_pid().values():
                units.extend(encode_ngrams([e.syscall for e in events], n))
        else:
            units.extend(tuple(g) for g in item)
    if not units:
        raise ValueError("cannot build a vocabulary from an empty training set")
    return Vocabulary(units)


@dataclass(frozen=True, eq=False)
class CompressedWindow:
    pid: int
    ngram_seq: tuple[int, ...]
    density_seq: tuple[int, ...]
    sys_freq: np.ndarray = field(repr=False)
    window_index: int
    start_time: int
    end_time: int
    label: Label | None = None

    @property
    def size(self) -> int:
        return int(sum(self.density_seq))

    def expand(self) -> list[int]:
        return decompress(self.ngram_seq, self.density_seq)

    def key(self) -> tuple[int, int]:
        return self.pid, self.window_index

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompressedWindow):
            return NotImplemented
        return (self.pid == other.pid and self.ngram_seq == other.ngram_seq
                and self.density_seq == other.density_seq
                and self.window_index == other.window_index
                and self.start_time == other.start_time and self.end_time == other.end_time
                and self.label == other.label
                and np.array_equal(self.sys_freq, other.sys_freq))

    def to_record(self) -> dict:
        return {
            "pid": self.pid,
            "ngram_seq": list(self.ngram_seq),
            "density_seq": list(self.density_seq),
            "sys_freq": self.sys_freq.tolist(),
            "window_index": self.window_index,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "label": None if self.label is None else self.label.value,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CompressedWindow":
        return cls(
            pid=int(rec["pid"]),
            ngram_seq=tuple(rec["ngram_seq"]),
            density_seq=tuple(rec["density_seq"]),
            sys_freq=np.asarray(rec["sys_freq"], dtype=np.float64),
            window_index=int(rec["window_index"]),
            start_time=int(rec["start_time"]),
            end_time=int(rec["end_time"]),
            label=None if rec.get("label") is None else Label(rec["label"]),
        )


def dump_windows(windows: Iterable[CompressedWindow]) -> str:
    return "".join(json.dumps(w.to_record()) + "\n" for w in windows)


def load_windows(text: str) -> list[CompressedWindow]:
    return [CompressedWindow.from_record(json.loads(line))
            for line in text.splitlines() if line.strip()]


@dataclass
class _PidState:
    recent: list[int] = field(default_factory=list)  # last n-1 syscalls
    grams: list[Gram] = field(default_factory=list)
    times: list[int] = field(default_factory=list)
    offset: int = 0  # raw-gram position of grams[0]
    next_start: int = 0
    emitted: int = 0


class WindowEmitter:
    """Incremental window builder fed one event at a time.

    A completed window is released only once the clock has moved strictly past
    its end time, so that every gram sharing that timestamp (from any pid) is
    already counted in its system-wide frequency vector. This makes the stream
    of released windows identical whether a log is replayed in one go or event
    by event.
    """

    def __init__(self, cfg: WindowConfig, vocab: Vocabulary,
                 labels: dict[int, Label] | None = None):
        self.cfg = cfg
        self.vocab = vocab
        self.labels = labels or {}
        self._pids: dict[int, _PidState] = {}
        self._g_times: list[int] = []
        self._g_index: list[int] = []
        self._g_pid: list[int] = []
        self._pending: list[tuple[int, int, int, list[Gram], int, int]] = []
        self._now: int | None = None
        # windows filled per pid; survives drop()
        self._filled: dict[int, int] = {}

    @property
    def now(self) -> int | None:
        return self._now

    def push(self, event: SyscallEvent) -> list[CompressedWindow]:
        """Add one event; return windows whose end time is now in the past."""
        if self._now is not None and event.timestamp < self._now:
            raise ValueError(f"event at {event.timestamp} precedes clock {self._now}")
        out = self.advance(event.timestamp)
        st = self._pids.get(event.pid)
        if st is None:
            st = self._pids[event.pid] = _PidState()
        n = self.cfg.n
        st.recent.append(event.syscall)
        if len(st.recent) > n:
            del st.recent[0]
        if len(st.recent) == n:
            gram = tuple(st.recent)
            st.grams.append(gram)
            st.times.append(event.timestamp)
            self._g_times.append(event.timestamp)
            self._g_index.append(self.vocab.index(gram))
            self._g_pid.append(event.pid)
            self._collect(event.pid, st)
        return out

    def advance(self, t: int) -> list[CompressedWindow]:
        """Move the clock to ``t``; release windows ending strictly before it."""
        if self._now is None or t > self._now:
            self._now = t
        return self._release(lambda end: end < t)

    def flush(self) -> list[CompressedWindow]:
        """Release every completed window (end of input)."""
        return self._release(lambda end: True)

    def drop(self, pid: int) -> None:
        """Stop tracking ``pid`` (killed); its unreleased windows are discarded."""
        self._pids.pop(pid, None)
        self._pending = [p for p in self._pending if p[1] != pid]

    def windows_emitted(self, pid: int) -> int:
        """Windows ``pid`` has filled so far, released or not, dropped or not."""
        return self._filled.get(pid, 0)

    def gram_counts(self) -> dict[int, int]:
        return {pid: st.offset + len(st.grams) for pid, st in self._pids.items()}

    def _collect(self, pid: int, st: _PidState) -> None:
        w, s = self.cfg.window_size, self.cfg.stride
        while st.offset + len(st.grams) >= st.next_start + w:
            lo = st.next_start - st.offset
            grams = st.grams[lo:lo + w]
            start_t, end_t = st.times[lo], st.times[lo + w - 1]
            self._pending.append((end_t, pid, st.emitted, grams, start_t, end_t))
            st.emitted += 1
            self._filled[pid] = st.emitted
            st.next_start += s
            # keep only grams that later windows can still reach
            cut = st.next_start - st.offset
            del st.grams[:cut]
            del st.times[:cut]
            st.offset = st.next_start

    def _release(self, ready) -> list[CompressedWindow]:
        if not self._pending:
            return []
        go = [p for p in self._pending if ready(p[0])]
        if not go:
            return []
        self._pending = [p for p in self._pending if not ready(p[0])]
        go.sort(key=lambda p: (p[0], p[1], p[2]))
        return [self._build(*p) for p in go]

    def _build(self, end_key, pid, idx, grams, start_t, end_t) -> CompressedWindow:
        units, dens = compress(grams)
        lo = bisect.bisect_left(self._g_times, start_t)
        hi = bisect.bisect_right(self._g_times, end_t)
        gi = np.asarray(self._g_index[lo:hi], dtype=np.int64)
        if self.cfg.exclude_self:
            gp = np.asarray(self._g_pid[lo:hi], dtype=np.int64)
            gi = gi[gp != pid]
        freq = np.bincount(gi, minlength=self.vocab.size).astype(np.float64)
        total = freq.sum()
        if not self.cfg.raw_counts and total > 0:
            freq /= total
        return CompressedWindow(
            pid=pid,
            ngram_seq=tuple(self.vocab.index(u) for u in units),
            density_seq=tuple(dens),
            sys_freq=freq,
            window_index=idx,
            start_time=start_t,
            end_time=end_t,
            label=self.labels.get(pid),
        )


@dataclass
class WindowStats:
    windows: int = 0
    unfilled_pids: list[int] = field(default_factory=list)

    @property
    def unfilled_window_count(self) -> int:
        return len(self.unfilled_pids)


def emit_windows(log: TraceLog, cfg: WindowConfig, vocab: Vocabulary,
                 labels: dict[int, Label] | None = None,
                 stats: WindowStats | None = None) -> Iterator[CompressedWindow]:
    """All windows of a complete log, in order of completion time.

    If ``stats`` is given it is filled with the window count and the pids that
    never accumulated a full window.
    """
    em = WindowEmitter(cfg, vocab, labels)
    count = 0
    for e in log.events:
        for w in em.push(e):
            count += 1
            yield w
    for w in em.flush():
        count += 1
        yield w
    if stats is not None:
        stats.windows = count
        stats.unfilled_pids = [p for p in log.pids() if em.windows_emitted(p) == 0]


def window_frequency(window: CompressedWindow, vocab_size: int) -> np.ndarray:
    """Normalised n-gram counts of the window's own grams."""
    counts = np.bincount(np.asarray(window.ngram_seq, dtype=np.int64),
                         weights=np.asarray(window.density_seq, dtype=np.float64),
                         minlength=vocab_size)
    if counts.shape[0] != vocab_size:
        raise ValueError("window index outside vocabulary")
    total = counts.sum()
    return counts / total if total > 0 else counts


def compression_ratio(windows: Iterable[CompressedWindow]) -> float:
    raw = packed = 0
    for w in windows:
        raw += w.size
        packed += len(w.ngram_seq)
    return raw / packed if packed else 1.0
