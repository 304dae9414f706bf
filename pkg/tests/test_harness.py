import pytest

from hybriddetect.delay import apply_delays
from hybriddetect.harness import ModelScorers, load_scorers, report, run_log, run_offline_log
from hybriddetect.router import Action, Source, unresolved_escalations, window_verdict_lines
from hybriddetect.trace import ConfigError, Label


def oracle_scorers(labels):
    def score(w):
        return 1.0 if labels[w.pid] is Label.MALICIOUS else 0.0
    return score


def run(world, **kw):
    cfg = world.cfg.replace(**kw)
    return cfg, run_log(cfg, world.trace, world.labels, world.scorers, world.models.vocabulary)


@pytest.mark.parametrize("pipeline", ["hybrid", "fast_only", "slow_only"])
def test_observe_only_offline_equals_online(world, pipeline):
    common = dict(pipeline=pipeline, observe_only=True, delay=False, duration_ms=0)
    _, off = run(world, mode="offline", **common)
    _, on = run(world, mode="online", **common)
    assert off.verdicts and window_verdict_lines(off.verdicts) == window_verdict_lines(on.verdicts)


def test_perfect_classifier_scores_perfectly(world):
    oracle = oracle_scorers(world.labels)
    cfg = world.cfg.replace(mode="offline")
    res = run_offline_log(cfg, world.trace, world.labels, oracle, oracle, world.models.vocabulary)
    rep = report(cfg, res)
    filled = [p for p in world.labels if p not in res.stats.unfilled_pids]
    assert rep.fp_rate == 0.0
    assert rep.confusion.tp == sum(world.labels[p] is Label.MALICIOUS for p in filled)
    assert rep.move_percentage == 0.0


def test_reports_are_deterministic(world):
    for mode in ("offline", "online"):
        a = report(*run(world, mode=mode))
        b = report(*run(world, mode=mode))
        assert a.dumps() == b.dumps() and a.process_csv() == b.process_csv()


def test_kill_is_terminal_and_escalations_resolve(world):
    _, res = run(world, mode="online")
    seen_kill = set()
    for v in res.verdicts:
        assert v.pid not in seen_kill
        if v.action is Action.KILL:
            seen_kill.add(v.pid)
    assert not unresolved_escalations(res.verdicts)


def test_cost_accounting(world):
    cfg, res = run(world, mode="online")
    escalations = sum(v.action is Action.ESCALATE for v in res.verdicts)
    slow = sum(v.source is Source.SLOW for v in res.verdicts)
    assert res.cost.slow_calls == slow == escalations
    assert res.cost.slow_total == cfg.slow_cost_ms * escalations
    assert res.cost.fast_calls == sum(v.source is Source.FAST for v in res.verdicts)


def test_online_loses_windows_to_kills(world):
    _, off = run(world, mode="offline")
    _, on = run(world, mode="online")
    assert on.stats.unfilled_window_count >= off.stats.unfilled_window_count
    assert on.stats.windows <= off.stats.windows


def test_delays_only_add_time_and_match_the_timeline(world):
    cfg, on = run(world, mode="online", delay=True, delay_threshold=0.5, observe_only=True)
    _, off = run(world, mode="online", delay=False, observe_only=True)
    assert on.delays_applied > 0
    original = world.trace.by_pid()
    delayed = {}
    for e in on.replayed:
        delayed.setdefault(e.pid, []).append(e)
    plain = {}
    for e in off.replayed:
        plain.setdefault(e.pid, []).append(e)
    assert delayed.keys() == plain.keys()
    for pid, evs in delayed.items():
        assert [e.syscall for e in evs] == [e.syscall for e in original[pid]]
        assert all(a.timestamp >= b.timestamp for a, b in zip(evs, plain[pid]))
    # the engine's delays are exactly what the log transform gives for its timeline
    expected = apply_delays(world.trace, on.borderline_timeline, cfg.delay_policy)
    assert expected.by_pid() == delayed


def test_detection_can_land_after_the_duration(world):
    cfg, res = run(world, mode="online", duration_ms=3000)
    assert all(e.timestamp <= 3000 for e in res.replayed)
    # queued classifications keep draining after arrivals stop
    assert max(v.time for v in res.verdicts) > 3000


def test_missing_model_is_a_config_error(tmp_path, world):
    cfg = world.cfg.replace(fast_model=str(tmp_path / "none.json"))
    with pytest.raises(ConfigError):
        load_scorers(cfg)
    with pytest.raises(ConfigError):
        ModelScorers(None, None).fast(None)
