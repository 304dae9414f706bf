import pytest
from hypothesis import given, strategies as st

from hybriddetect.router import (Action, BorderlineInterval, Router, RouterStateError, Source,
                                 Verdict, dump_verdicts, load_verdicts, move_percentage,
                                 route_fast, route_slow, unresolved_escalations,
                                 window_verdict_lines)

probs = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def intervals(draw):
    a, b = sorted((draw(probs), draw(probs)))
    return BorderlineInterval(a, b)


def test_route_fast_examples():
    iv = BorderlineInterval(0.3, 0.7)
    assert route_fast(0.10, iv) is Action.CONTINUE
    assert route_fast(0.50, iv) is Action.ESCALATE
    assert route_fast(0.90, iv) is Action.KILL
    assert route_fast(0.30, iv) is Action.ESCALATE
    assert route_fast(0.70, iv) is Action.ESCALATE


@given(probs, intervals())
def test_fast_actions_partition_probabilities(p, iv):
    action = route_fast(p, iv)
    assert (action is Action.CONTINUE) == (p < iv.lower)
    assert (action is Action.KILL) == (p > iv.upper)
    assert (action is Action.ESCALATE) == (p in iv)


def test_invalid_interval():
    with pytest.raises(ValueError):
        BorderlineInterval(0.8, 0.2)
    with pytest.raises(ValueError):
        BorderlineInterval(-0.1, 0.5)


def test_route_slow_threshold():
    assert route_slow(0.5) is Action.KILL
    assert route_slow(0.49) is Action.CONTINUE


def test_slow_verdict_resolves_borderline_and_lifts_delay():
    r = Router()
    assert r.fast(1, 0, 0.5, 1.0).action is Action.ESCALATE
    assert r.pending(1)
    v = r.slow(1, 0, 0.1, 2.0)
    assert v.action is Action.CONTINUE and v.remove_delay and not r.pending(1)
    r.fast(1, 1, 0.6, 3.0)
    v = r.slow(1, 1, 0.9, 4.0)
    assert v.action is Action.KILL and not v.remove_delay and not r.active(1)
    with pytest.raises(RouterStateError):
        r.fast(1, 2, 0.1, 5.0)


def test_state_errors():
    r = Router()
    with pytest.raises(RouterStateError):
        r.slow(1, 0, 0.2, 0.0)
    r.fast(1, 0, 0.5, 0.0)
    with pytest.raises(RouterStateError):
        r.fast(1, 1, 0.5, 0.0)


def test_loop_guard_clears_after_max_roundtrips():
    r = Router(max_roundtrips=3)
    for w, p in enumerate((0.1, 0.2, 0.3)):
        assert r.fast(7, w, 0.5, w).action is Action.ESCALATE
        assert r.slow(7, w, p, w).action is Action.CONTINUE
    v = r.fast(7, 3, 0.5, 3)
    assert v.action is Action.CLEAR and not r.active(7)


def test_loop_guard_uses_last_slow_probability():
    # observe-only keeps a slow-path Kill non-terminal, so the guard can see p >= 0.5
    r = Router(max_roundtrips=2, observe_only=True)
    for w, p in enumerate((0.1, 0.8)):
        r.fast(7, w, 0.5, w)
        r.slow(7, w, p, w)
    assert r.fast(7, 2, 0.5, 2).action is Action.KILL


def test_observe_only_kill_is_not_terminal():
    r = Router(observe_only=True)
    assert r.fast(3, 0, 0.95, 0).action is Action.KILL
    assert r.active(3)
    assert r.fast(3, 1, 0.1, 1).action is Action.CONTINUE


def test_final_decision_for_single_classifier_pipelines():
    r = Router()
    assert r.final(1, 0, 0.49, 0, Source.FAST, 0.5).action is Action.CONTINUE
    assert r.final(1, 1, 0.5, 1, Source.FAST, 0.5).action is Action.KILL
    with pytest.raises(RouterStateError):
        r.final(1, 2, 0.1, 2, Source.FAST, 0.5)


@given(st.lists(st.tuples(st.integers(1, 5), probs, probs), max_size=60), intervals())
def test_borderline_set_tracks_unresolved_escalations(steps, iv):
    r = Router(iv, max_roundtrips=2)
    log, window = [], {}
    for pid, p_fast, p_slow in steps:
        if not r.active(pid):
            continue
        w = window.get(pid, 0)
        window[pid] = w + 1
        log.append(r.fast(pid, w, p_fast, len(log)))
        assert r.state.borderline_pids == unresolved_escalations(log)
        if r.pending(pid):
            log.append(r.slow(pid, w, p_slow, len(log)))
            assert r.state.borderline_pids == unresolved_escalations(log)
    killed = {}
    for i, v in enumerate(log):
        if v.action in (Action.KILL, Action.CLEAR):
            killed.setdefault(v.pid, i)
    for pid, i in killed.items():
        assert not any(v.pid == pid for v in log[i + 1:])


def test_move_percentage():
    vs = [Verdict(0, 1, 0, Source.FAST, 0.1, Action.CONTINUE),
          Verdict(0, 2, 0, Source.FAST, 0.5, Action.ESCALATE)]
    assert move_percentage([]) == 0.0
    assert move_percentage(vs) == 0.5
    assert move_percentage(vs, monitored=4) == 0.25
    assert move_percentage(vs, monitored=[2]) == 1.0


@given(st.lists(st.lists(probs, min_size=1, max_size=8), min_size=1, max_size=20), intervals(),
       intervals())
def test_wider_intervals_move_no_fewer_processes(trace, a, b):
    narrow = BorderlineInterval(max(a.lower, b.lower), max(min(a.upper, b.upper), max(a.lower, b.lower)))
    wide = BorderlineInterval(min(a.lower, b.lower), max(a.upper, b.upper))
    assert wide.contains_interval(narrow)

    def replay(iv):
        r, out = Router(iv), []
        for pid, ps in enumerate(trace):
            for w, p in enumerate(ps):
                if not r.active(pid):
                    break
                out.append(r.fast(pid, w, p, w))
                if r.pending(pid):
                    out.append(r.slow(pid, w, 0.0, w))
        return move_percentage(out, len(trace))

    assert replay(wide) >= replay(narrow)


def test_verdict_lines_round_trip():
    vs = [Verdict(12.5, 3, 0, Source.FAST, 0.1 + 0.2, Action.ESCALATE),
          Verdict(112.5, 3, 0, Source.SLOW, 0.25, Action.CONTINUE, remove_delay=True),
          Verdict(113.0, 4, 1, Source.FAST, 1.0, Action.KILL)]
    assert load_verdicts(dump_verdicts(vs)) == vs
    shifted = [Verdict(v.time + 1, v.pid, v.window, v.source, v.p, v.action) for v in reversed(vs)]
    assert window_verdict_lines(shifted) == window_verdict_lines(vs)
