import pytest

from hybriddetect.config import DeepSizes, ExperimentConfig, dump_config, load_config, parse_config
from hybriddetect.delay import DEFAULT_TARGETS
from hybriddetect.trace import ConfigError


def test_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert (cfg.lower, cfg.upper) == (0.3, 0.7)
    assert (cfg.fast_cost_ms, cfg.slow_cost_ms) == (1.0, 100.0)
    assert cfg.duration == 300_000
    assert cfg.delay_policy.targeted == frozenset(DEFAULT_TARGETS)


def test_flat_keys_reach_nested_configs():
    cfg = parse_config("""
# comment
mode = offline
duration_ms = 0            # whole trace
gen_separability = 0.6
gen_n_benign = 5
rf_n_trees = 7
dl_kernel_sizes = 3,5
opt_optimizer = sgd
opt_epochs = 2
delay_targets = 3, 17
observe_only = yes
""")
    assert cfg.mode == "offline" and cfg.duration is None
    assert cfg.generator.separability == 0.6 and cfg.generator.n_benign == 5
    assert cfg.forest.n_trees == 7
    assert cfg.deep.kernel_sizes == (3, 5)
    assert cfg.training.optimizer == "sgd" and cfg.training.epochs == 2
    assert cfg.delay_policy.targeted == frozenset({3, 17})
    assert cfg.observe_only is True


def test_dump_round_trips(tmp_path):
    cfg = ExperimentConfig(mode="offline", lower=0.2, upper=0.8,
                           deep=DeepSizes(atrous_rates=(1, 2), embed_dim=4))
    path = tmp_path / "exp.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


@pytest.mark.parametrize("text", [
    "bogus = 1",
    "gen_bogus = 1",
    "mode = sideways",
    "lower = 0.9\nupper = 0.1",
    "delay_threshold = 2",
    "duration_ms = -5",
    "observe_only = maybe",
    "rf_n_trees = many",
    "gen_separability = 3",
    "generator = 1",
    "not a key value line",
])
def test_bad_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)
