import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybriddetect.delay import (DEFAULT_TARGETS, DelayPolicy, Strategy, apply_delays,
                                maybe_delay)
from hybriddetect.trace import ConfigError, DEFAULT_ALPHABET_SIZE, SyscallEvent, TraceLog

TARGET = 3
OTHER = 4


def test_default_targets():
    assert len(DEFAULT_TARGETS) == 18
    assert set(DEFAULT_TARGETS.values()) == set(Strategy)
    DelayPolicy().validate(DEFAULT_ALPHABET_SIZE)
    with pytest.raises(ConfigError):
        DelayPolicy().validate(10)
    with pytest.raises(ConfigError):
        DelayPolicy(threshold=1.5)
    with pytest.raises(ConfigError):
        DelayPolicy(sleep_ms=-1)


def test_maybe_delay_eligibility():
    rng = np.random.default_rng(0)
    always = DelayPolicy(threshold=1.0)
    assert maybe_delay(SyscallEvent(0, 1, TARGET), {1}, always, rng) == 50
    assert maybe_delay(SyscallEvent(0, 1, OTHER), {1}, always, rng) == 0
    assert maybe_delay(SyscallEvent(0, 2, TARGET), {1}, always, rng) == 0
    never = DelayPolicy(threshold=0.0)
    assert all(maybe_delay(SyscallEvent(0, 1, TARGET), {1}, never, rng) == 0 for _ in range(100))


def test_delayed_fraction_matches_threshold():
    policy = DelayPolicy(threshold=0.1, seed=0)
    rng = policy.rng(1)
    e = SyscallEvent(0, 1, TARGET)
    hits = sum(maybe_delay(e, {1}, policy, rng) > 0 for _ in range(10_000))
    assert 0.085 <= hits / 10_000 <= 0.115


def pid_log(pid_rates, n=200, syscall=TARGET):
    rows = []
    for pid, gap in pid_rates.items():
        rows += [(i * gap, pid, syscall) for i in range(n)]
    return TraceLog(tuple(sorted(rows)))


logs = st.lists(st.tuples(st.integers(0, 500), st.integers(1, 4), st.sampled_from([TARGET, OTHER])),
                max_size=120).map(lambda r: TraceLog(tuple(sorted(r))))


@given(logs, st.floats(0.0, 1.0), st.integers(0, 100), st.integers(0, 2**31 - 1))
def test_delays_preserve_order_and_only_add_time(log, tau, delta, seed):
    policy = DelayPolicy(threshold=tau, sleep_ms=delta, seed=seed)
    timeline = {pid: [(0.0, float("inf"))] for pid in log.pids()}
    out = apply_delays(log, timeline, policy)
    times = [e.timestamp for e in out]
    assert times == sorted(times)
    before, after = log.by_pid(), out.by_pid()
    assert before.keys() == after.keys()
    for pid in before:
        assert [e.syscall for e in before[pid]] == [e.syscall for e in after[pid]]
        shifts = [b2.timestamp - b1.timestamp for b1, b2 in zip(before[pid], after[pid])]
        assert all(s >= 0 for s in shifts)
        assert shifts == sorted(shifts)
    assert apply_delays(log, timeline, policy) == out


@given(logs)
def test_null_policies_are_identities(log):
    everything = {pid: [(0.0, float("inf"))] for pid in log.pids()}
    assert apply_delays(log, everything, DelayPolicy(threshold=0.0)) == log
    assert apply_delays(log, everything, DelayPolicy(sleep_ms=0)) == log
    assert apply_delays(log, everything, DelayPolicy(targets={})) == log
    assert apply_delays(log, {}, DelayPolicy(threshold=1.0)) == log


def test_cumulative_shift():
    log = TraceLog(((0, 1, OTHER), (10, 1, TARGET), (20, 1, TARGET), (30, 1, OTHER)))
    out = apply_delays(log, {1: [(0, float("inf"))]}, DelayPolicy(threshold=1.0, sleep_ms=7))
    assert [e.timestamp for e in out] == [0, 17, 34, 44]


def test_delays_only_inside_borderline_intervals():
    log = TraceLog(tuple((t, 1, TARGET) for t in range(0, 100, 10)))
    out = apply_delays(log, {1: [(30, 55)]}, DelayPolicy(threshold=1.0, sleep_ms=5))
    # t=30 -> 35, t=40 -> 50 (shift 10), t=50 lands at 60 > 55: no more delays
    assert [e.timestamp for e in out] == [0, 10, 20, 35, 50, 60, 70, 80, 90, 100]


def test_busier_process_accrues_more_delay():
    # both pids are borderline for the same 2 s; pid 1 makes calls twice as often
    log = pid_log({1: 1, 2: 2}, n=4000)
    span = [(0.0, 2000.0)]
    out = apply_delays(log, {1: span, 2: span}, DelayPolicy(threshold=0.1, sleep_ms=5, seed=3))
    before, after = log.by_pid(), out.by_pid()
    added = {pid: after[pid][-1].timestamp - before[pid][-1].timestamp for pid in before}
    assert added[1] > added[2] > 0


def test_per_pid_draws_do_not_depend_on_other_processes():
    solo = TraceLog(tuple((t, 1, TARGET) for t in range(50)))
    mixed = TraceLog(tuple(sorted(list(solo.events) + [(t, 2, TARGET) for t in range(50)])))
    policy = DelayPolicy(threshold=0.3, seed=5)
    full = [(0.0, float("inf"))]
    a = apply_delays(solo, {1: full}, policy).by_pid()[1]
    b = apply_delays(mixed, {1: full, 2: full}, policy).by_pid()[1]
    assert a == b
