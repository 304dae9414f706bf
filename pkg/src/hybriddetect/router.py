"""Triage policy between the fast and slow classifiers.

A fast-path probability below the borderline interval lets the process run on,
one above it kills the process, and one inside it (endpoints included) moves
the process into the borderline set until the slow path decides. A process
that keeps bouncing between the two classifiers is settled for good after
``max_roundtrips`` slow-path returns.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class RouterStateError(RuntimeError):
    pass


class Source(enum.Enum):
    FAST = "FastPath"
    SLOW = "SlowPath"


class Action(enum.Enum):
    CONTINUE = "ContinueMonitoring"
    ESCALATE = "Escalate"
    KILL = "Kill"
    CLEAR = "ClearBenign"


SLOW_THRESHOLD = 0.5


@dataclass(frozen=True)
class BorderlineInterval:
    lower: float = 0.3
    upper: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.lower <= self.upper <= 1.0:
            raise ValueError(f"need 0 <= lower <= upper <= 1, got [{self.lower}, {self.upper}]")

    def __contains__(self, p: float) -> bool:
        return self.lower <= p <= self.upper

    def contains_interval(self, other: "BorderlineInterval") -> bool:
        return self.lower <= other.lower and other.upper <= self.upper


def route_fast(p: float, interval: BorderlineInterval) -> Action:
    if p < interval.lower:
        return Action.CONTINUE
    if p > interval.upper:
        return Action.KILL
    return Action.ESCALATE


def route_slow(p: float, threshold: float = SLOW_THRESHOLD) -> Action:
    return Action.KILL if p >= threshold else Action.CONTINUE


@dataclass(frozen=True)
class Verdict:
    time: float
    pid: int
    window: int
    source: Source
    p: float
    action: Action
    # slow-path ContinueMonitoring lifts the pid's delay
    remove_delay: bool = False

    def to_line(self) -> str:
        return "\t".join([format_time(self.time), str(self.pid), str(self.window),
                          self.source.value, repr(float(self.p)), self.action.value])

    @classmethod
    def from_line(cls, line: str) -> "Verdict":
        t, pid, window, source, p, action = line.rstrip("\n").split("\t")
        src, act = Source(source), Action(action)
        return cls(float(t), int(pid), int(window), src, float(p), act,
                   remove_delay=src is Source.SLOW and act is Action.CONTINUE)


def format_time(t: float) -> str:
    return f"{t:.3f}"


def dump_verdicts(verdicts: Iterable[Verdict]) -> str:
    return "".join(v.to_line() + "\n" for v in verdicts)


def load_verdicts(text: str) -> list[Verdict]:
    return [Verdict.from_line(line) for line in text.splitlines() if line.strip()]


def window_verdict_lines(verdicts: Iterable[Verdict]) -> str:
    """Timing-free per-window decisions, ordered by (pid, window, source).

    Used to compare routing decisions between runs whose clocks differ.
    """
    rank = {Source.FAST: 0, Source.SLOW: 1}
    rows = sorted(verdicts, key=lambda v: (v.pid, v.window, rank[v.source]))
    return "".join(f"{v.pid}\t{v.window}\t{v.source.value}\t{v.p!r}\t{v.action.value}\n"
                   for v in rows)


def move_percentage(verdicts: Iterable[Verdict], monitored: int | Sequence[int] | None = None) -> float:
    """Fraction of monitored processes that were ever escalated.

    ``monitored`` is the process count (or the pids); by default every pid
    appearing in the verdicts.
    """
    verdicts = list(verdicts)
    escalated = {v.pid for v in verdicts if v.action is Action.ESCALATE}
    if monitored is None:
        n = len({v.pid for v in verdicts})
    elif isinstance(monitored, int):
        n = monitored
    else:
        n = len(set(monitored))
    return len(escalated) / n if n else 0.0


@dataclass
class RouterState:
    interval: BorderlineInterval = field(default_factory=BorderlineInterval)
    max_roundtrips: int = 3
    borderline_pids: set[int] = field(default_factory=set)
    roundtrips: dict[int, int] = field(default_factory=dict)
    last_slow_p: dict[int, float] = field(default_factory=dict)
    # pids with a terminal verdict (Kill or ClearBenign)
    finished: dict[int, Action] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_roundtrips < 1:
            raise ValueError("max_roundtrips must be >= 1")


class Router:
    """Applies verdicts for all pids in order; the single writer of RouterState.

    With ``observe_only`` a Kill is logged but not terminal, so every window
    of every process keeps being routed.
    """

    def __init__(self, interval: BorderlineInterval = BorderlineInterval(),
                 max_roundtrips: int = 3, observe_only: bool = False,
                 slow_threshold: float = SLOW_THRESHOLD):
        self.state = RouterState(interval, max_roundtrips)
        self.observe_only = observe_only
        self.slow_threshold = slow_threshold

    def active(self, pid: int) -> bool:
        return pid not in self.state.finished

    def pending(self, pid: int) -> bool:
        return pid in self.state.borderline_pids

    def fast(self, pid: int, window: int, p: float, time: float) -> Verdict:
        st = self.state
        if not self.active(pid):
            raise RouterStateError(f"pid {pid} already has a terminal verdict")
        if pid in st.borderline_pids:
            raise RouterStateError(f"pid {pid} is awaiting a slow-path verdict")
        action = route_fast(p, st.interval)
        if action is Action.ESCALATE:
            if st.roundtrips.get(pid, 0) >= st.max_roundtrips:
                # loop guard: the last slow-path verdict becomes final
                action = route_slow(st.last_slow_p[pid], self.slow_threshold)
                action = Action.KILL if action is Action.KILL else Action.CLEAR
            else:
                st.borderline_pids.add(pid)
        self._settle(pid, action)
        return Verdict(time, pid, window, Source.FAST, p, action)

    def slow(self, pid: int, window: int, p: float, time: float) -> Verdict:
        st = self.state
        if pid not in st.borderline_pids:
            raise RouterStateError(f"pid {pid} is not awaiting a slow-path verdict")
        st.borderline_pids.discard(pid)
        st.roundtrips[pid] = st.roundtrips.get(pid, 0) + 1
        st.last_slow_p[pid] = p
        action = route_slow(p, self.slow_threshold)
        self._settle(pid, action)
        return Verdict(time, pid, window, Source.SLOW, p, action,
                       remove_delay=action is Action.CONTINUE)

    def final(self, pid: int, window: int, p: float, time: float, source: Source,
              threshold: float) -> Verdict:
        """Single-classifier decision: Kill iff ``p >= threshold``, no escalation."""
        if not self.active(pid):
            raise RouterStateError(f"pid {pid} already has a terminal verdict")
        action = route_slow(p, threshold)
        self._settle(pid, action)
        return Verdict(time, pid, window, source, p, action)

    def _settle(self, pid: int, action: Action) -> None:
        if action is Action.CLEAR or (action is Action.KILL and not self.observe_only):
            self.state.finished[pid] = action


def unresolved_escalations(verdicts: Iterable[Verdict]) -> set[int]:
    """Pids whose latest fast-path Escalate has no slow-path verdict after it."""
    open_: set[int] = set()
    for v in verdicts:
        if v.source is Source.FAST and v.action is Action.ESCALATE:
            open_.add(v.pid)
        elif v.source is Source.SLOW:
            open_.discard(v.pid)
    return open_
