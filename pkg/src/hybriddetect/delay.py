"""Probabilistic syscall delays for processes under slow-path analysis.

While a process is in the borderline set, each of its targeted syscalls is
held back by ``sleep_ms`` with probability ``threshold``. A delay shifts that
event and every later event of the same process. Draws come from a per-pid
generator seeded by ``(seed, pid)``, so the delays a process receives do not
depend on how other processes interleave with it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .trace import ConfigError, SyscallEvent, TraceLog


class Strategy(enum.Enum):
    FILE = "File"
    MEMORY = "Memory"
    PROCESS_CREATION = "ProcessCreation"
    NETWORK = "Network"


# 18 syscall ids of the synthetic alphabet, tagged by the behaviour they
# stand for: critical-file access, memory tampering, process spawning and
# network traffic.
DEFAULT_TARGETS: dict[int, Strategy] = {
    3: Strategy.FILE, 17: Strategy.FILE, 29: Strategy.FILE, 41: Strategy.FILE, 55: Strategy.FILE,
    8: Strategy.MEMORY, 23: Strategy.MEMORY, 62: Strategy.MEMORY, 77: Strategy.MEMORY,
    12: Strategy.PROCESS_CREATION, 36: Strategy.PROCESS_CREATION, 90: Strategy.PROCESS_CREATION,
    101: Strategy.PROCESS_CREATION, 118: Strategy.PROCESS_CREATION,
    47: Strategy.NETWORK, 84: Strategy.NETWORK, 133: Strategy.NETWORK, 149: Strategy.NETWORK,
}


@dataclass(frozen=True)
class DelayPolicy:
    targets: Mapping[int, Strategy] = field(default_factory=lambda: dict(DEFAULT_TARGETS))
    threshold: float = 0.1
    sleep_ms: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("delay threshold must lie in [0, 1]")
        if self.sleep_ms < 0:
            raise ConfigError("sleep_ms must be >= 0")

    @classmethod
    def from_ids(cls, ids: Sequence[int], **kw) -> "DelayPolicy":
        """Policy over explicit ids; ids outside the default table count as File."""
        return cls(targets={int(i): DEFAULT_TARGETS.get(int(i), Strategy.FILE) for i in ids}, **kw)

    @property
    def targeted(self) -> frozenset[int]:
        return frozenset(self.targets)

    @property
    def is_null(self) -> bool:
        return self.threshold == 0.0 or self.sleep_ms == 0 or not self.targets

    def validate(self, alphabet_size: int) -> None:
        bad = [i for i in self.targets if not 0 <= i < alphabet_size]
        if bad:
            raise ConfigError(f"targeted syscalls outside the alphabet: {sorted(bad)}")

    def rng(self, pid: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, pid])


def maybe_delay(event: SyscallEvent, borderline_pids, policy: DelayPolicy,
                rng: np.random.Generator) -> int:
    """``sleep_ms`` with probability ``threshold`` for an eligible event, else 0.

    Only eligible events (borderline pid, targeted syscall) consume a draw.
    """
    if event.pid not in borderline_pids or event.syscall not in policy.targets:
        return 0
    return policy.sleep_ms if rng.random() < policy.threshold else 0


def _borderline_at(intervals, t) -> bool:
    return any(lo <= t < hi for lo, hi in intervals)


def apply_delays(log: TraceLog, timeline: Mapping[int, Sequence[tuple[float, float]]],
                 policy: DelayPolicy) -> TraceLog:
    """Shift each pid's events by the delays it accrues while borderline.

    ``timeline[pid]`` lists half-open ``[start, end)`` intervals of adjusted
    (delayed) time during which the pid was borderline. The result is sorted
    by adjusted time, ties broken by pid and then original order.
    """
    if policy.is_null or not any(timeline.values()):
        return log
    rows = []
    for pid, events in log.by_pid().items():
        intervals = timeline.get(pid, ())
        rng = policy.rng(pid)
        shift = 0
        for seq, e in enumerate(events):
            t = e.timestamp + shift
            if intervals and _borderline_at(intervals, t):
                d = maybe_delay(e, (pid,), policy, rng)
                t += d
                shift += d
            rows.append((t, pid, seq, e.syscall))
    rows.sort()
    return TraceLog(tuple(SyscallEvent(t, pid, sc) for t, pid, _, sc in rows))
