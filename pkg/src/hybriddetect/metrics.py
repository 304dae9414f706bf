"""Process-level and window-level detection metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .router import Action, Source, Verdict, move_percentage
from .trace import Label


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(f"{name}_undefined")
        return 0.0
    return num / den


def rates(c: Confusion) -> tuple[dict[str, float], list[str]]:
    """accuracy, precision, recall, f1, fp_rate; zero denominators give 0 plus a flag."""
    flags: list[str] = []
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    if precision + recall == 0:
        flags.append("f1_undefined")
    out = {
        "accuracy": _ratio(c.tp + c.tn, c.total, "accuracy", flags),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "fp_rate": _ratio(c.fp, c.fp + c.tn, "fp_rate", flags),
    }
    return out, flags


@dataclass
class CostSummary:
    fast_calls: int = 0
    slow_calls: int = 0
    fast_cost_ms: float = 1.0
    slow_cost_ms: float = 100.0

    @property
    def fast_total(self) -> float:
        return self.fast_calls * self.fast_cost_ms

    @property
    def slow_total(self) -> float:
        return self.slow_calls * self.slow_cost_ms

    @property
    def total(self) -> float:
        return self.fast_total + self.slow_total

    def to_json(self) -> dict:
        return {"fast_calls": self.fast_calls, "slow_calls": self.slow_calls,
                "fast_cost_ms": self.fast_cost_ms, "slow_cost_ms": self.slow_cost_ms,
                "fast_total_ms": self.fast_total, "slow_total_ms": self.slow_total,
                "total_ms": self.total}


@dataclass
class ProcessOutcome:
    pid: int
    label: Label
    killed: bool
    killed_at: float | None
    kill_source: Source | None
    detection_ms: float | None
    escalations: int
    windows: int


@dataclass
class ExperimentReport:
    confusion: Confusion
    accuracy: float
    precision: float
    recall: float
    f1: float
    fp_rate: float
    degenerate: list[str]
    detection_time: dict
    move_percentage: float
    unfilled_window_count: int
    windows_processed: int
    window_confusion: Confusion
    window_accuracy: float
    cost: CostSummary
    processes: list[ProcessOutcome] = field(default_factory=list, repr=False)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "meta": self.meta,
            "confusion": asdict(self.confusion),
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "fp_rate": self.fp_rate,
            "degenerate": self.degenerate,
            "detection_time": self.detection_time,
            "move_percentage": self.move_percentage,
            "unfilled_window_count": self.unfilled_window_count,
            "windows_processed": self.windows_processed,
            "window_confusion": asdict(self.window_confusion),
            "window_accuracy": self.window_accuracy,
            "cost": self.cost.to_json(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def process_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pid", "label", "verdict", "killed_at_ms", "kill_source",
                    "detection_ms", "escalations", "windows"])
        for o in self.processes:
            w.writerow([o.pid, o.label.value, "Kill" if o.killed else "Alive",
                        "" if o.killed_at is None else f"{o.killed_at:.3f}",
                        "" if o.kill_source is None else o.kill_source.value,
                        "" if o.detection_ms is None else f"{o.detection_ms:.3f}",
                        o.escalations, o.windows])
        return buf.getvalue()


def _summary(values: Sequence[float]) -> dict:
    if not values:
        return {"count": 0, "mean": None, "median": None, "p90": None, "max": None, "values": []}
    a = np.asarray(values, dtype=np.float64)
    return {"count": int(a.size), "mean": float(a.mean()), "median": float(np.median(a)),
            "p90": float(np.percentile(a, 90)), "max": float(a.max()),
            "values": [float(v) for v in a]}


def compute_metrics(verdicts: Iterable[Verdict], labels: Mapping[int, Label],
                    monitored: Sequence[int] | None = None,
                    start_times: Mapping[int, float] | None = None,
                    unfilled_window_count: int = 0,
                    cost: CostSummary | None = None,
                    meta: dict | None = None) -> ExperimentReport:
    """Process-level report: a process counts as flagged iff it has a Kill verdict.

    ``monitored`` defaults to every labelled pid. Detection time runs from a
    process's first event (``start_times``) to its first Kill.
    """
    verdicts = list(verdicts)
    pids = sorted(labels) if monitored is None else sorted(set(monitored))
    for pid in set(pids) | {v.pid for v in verdicts}:
        if pid not in labels:
            raise DataError(f"pid {pid} has no label")
    start_times = start_times or {}

    first_kill: dict[int, Verdict] = {}
    escalations: dict[int, int] = {}
    window_final: dict[tuple[int, int], Action] = {}
    for v in verdicts:
        if v.action is Action.KILL and v.pid not in first_kill:
            first_kill[v.pid] = v
        if v.action is Action.ESCALATE:
            escalations[v.pid] = escalations.get(v.pid, 0) + 1
        window_final[(v.pid, v.window)] = v.action

    tp = fp = tn = fn = 0
    outcomes = []
    detection = []
    windows_per_pid: dict[int, int] = {}
    for pid, _ in window_final:
        windows_per_pid[pid] = windows_per_pid.get(pid, 0) + 1
    for pid in pids:
        mal = labels[pid].is_malicious
        kill = first_kill.get(pid)
        det = None
        if kill is not None and pid in start_times:
            det = kill.time - start_times[pid]
        if mal and kill is not None:
            tp += 1
            if det is not None:
                detection.append(det)
        elif mal:
            fn += 1
        elif kill is not None:
            fp += 1
        else:
            tn += 1
        outcomes.append(ProcessOutcome(pid, labels[pid], kill is not None,
                                       None if kill is None else kill.time,
                                       None if kill is None else kill.source,
                                       det, escalations.get(pid, 0), windows_per_pid.get(pid, 0)))
    conf = Confusion(tp, fp, tn, fn)
    r, flags = rates(conf)

    wtp = wfp = wtn = wfn = 0
    for (pid, _), action in window_final.items():
        flagged = action is Action.KILL
        if labels[pid].is_malicious:
            wtp += flagged
            wfn += not flagged
        else:
            wfp += flagged
            wtn += not flagged
    wconf = Confusion(wtp, wfp, wtn, wfn)
    wacc = (wtp + wtn) / wconf.total if wconf.total else 0.0

    return ExperimentReport(
        confusion=conf, degenerate=flags, **r,
        detection_time=_summary(detection),
        move_percentage=move_percentage(verdicts, pids),
        unfilled_window_count=unfilled_window_count,
        windows_processed=len(window_final),
        window_confusion=wconf, window_accuracy=wacc,
        cost=cost or CostSummary(), processes=outcomes, meta=dict(meta or {}),
    )
