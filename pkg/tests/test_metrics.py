import json

import pytest
from hypothesis import given, strategies as st

from hybriddetect.metrics import Confusion, CostSummary, DataError, compute_metrics, rates
from hybriddetect.router import Action, Source, Verdict
from hybriddetect.trace import Label

B, M = Label.BENIGN, Label.MALICIOUS


def kill(pid, t, window=0, source=Source.FAST):
    return Verdict(t, pid, window, source, 0.9, Action.KILL)


def cont(pid, t, window=0):
    return Verdict(t, pid, window, Source.FAST, 0.1, Action.CONTINUE)


def test_perfect_detection():
    r, flags = rates(Confusion(tp=1, fp=0, tn=1, fn=0))
    assert r["accuracy"] == 1.0 and r["f1"] == 1.0 and not flags


def test_hand_computed_rates():
    r, _ = rates(Confusion(tp=3, fp=1, tn=9, fn=1))
    assert r["precision"] == pytest.approx(0.75)
    assert r["recall"] == pytest.approx(0.75)
    assert r["f1"] == pytest.approx(0.75)
    assert r["fp_rate"] == pytest.approx(0.1)


def test_empty_log_all_benign():
    rep = compute_metrics([], {1: B, 2: B})
    assert rep.accuracy == 1.0
    assert rep.recall == 0.0 and "recall_undefined" in rep.degenerate
    assert rep.confusion == Confusion(tn=2)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_rate_identities(tp, fp, tn, fn):
    r, flags = rates(Confusion(tp, fp, tn, fn))
    assert all(0.0 <= v <= 1.0 for v in r.values())
    p, rc = r["precision"], r["recall"]
    if p + rc > 0:
        assert r["f1"] == pytest.approx(2 * p * rc / (p + rc))
    if fp + tn:
        assert r["fp_rate"] == pytest.approx(fp / (fp + tn))
    else:
        assert "fp_rate_undefined" in flags
    if tp + fp + tn + fn:
        assert r["accuracy"] == pytest.approx((tp + tn) / (tp + fp + tn + fn))


def test_process_confusion_and_detection_time():
    labels = {1: M, 2: M, 3: B, 4: B}
    verdicts = [cont(1, 10), kill(1, 30, 1), cont(2, 12), kill(3, 40), cont(4, 50),
                Verdict(45, 2, 1, Source.FAST, 0.5, Action.ESCALATE),
                Verdict(145, 2, 1, Source.SLOW, 0.2, Action.CONTINUE, remove_delay=True)]
    rep = compute_metrics(verdicts, labels, start_times={1: 5, 2: 0, 3: 0, 4: 0},
                          cost=CostSummary(fast_calls=6, slow_calls=1))
    assert rep.confusion == Confusion(tp=1, fp=1, tn=1, fn=1)
    assert rep.detection_time["values"] == [25.0]
    assert rep.move_percentage == 0.25
    assert rep.windows_processed == 6
    # window-level: final action per (pid, window)
    assert rep.window_confusion == Confusion(tp=1, fp=1, tn=1, fn=3)
    assert rep.cost.total == 6 * 1.0 + 100.0
    rows = rep.process_csv().splitlines()
    assert rows[0].startswith("pid,label,verdict")
    assert rows[1] == "1,M,Kill,30.000,FastPath,25.000,0,2"
    assert rows[2] == "2,M,Alive,,,,1,2"
    data = json.loads(rep.dumps())
    assert data["confusion"] == {"tp": 1, "fp": 1, "tn": 1, "fn": 1}


def test_unlabelled_pid_is_a_data_error():
    with pytest.raises(DataError):
        compute_metrics([kill(9, 1)], {1: B})
    with pytest.raises(DataError):
        compute_metrics([], {1: B}, monitored=[1, 2])


def test_first_kill_counts():
    rep = compute_metrics([kill(1, 10), kill(1, 20, 1)], {1: M}, start_times={1: 0})
    assert rep.detection_time["values"] == [10.0]
    assert rep.processes[0].killed_at == 10
