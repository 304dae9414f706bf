import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hybriddetect.config import DeepSizes, ExperimentConfig
from hybriddetect.experiments import train_models, trial_traces
from hybriddetect.forest import ForestParams
from hybriddetect.harness import ModelScorers
from hybriddetect.reconstruction import CompressedWindow
from hybriddetect.slow_path import TrainParams
from hybriddetect.trace import GeneratorConfig, Label

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


SMALL_GEN = GeneratorConfig(n_benign=8, n_malicious=8, events_per_process_mean=400.0,
                            separability=0.8, behavior_seed=5)


def small_config(**kw) -> ExperimentConfig:
    """Cheap models: a few shallow trees and a narrow network trained briefly."""
    base = ExperimentConfig(
        generator=SMALL_GEN,
        forest=ForestParams(n_trees=8, max_depth=6, seed=1),
        deep=DeepSizes(embed_dim=4, conv_channels=2, lstm_hidden=4, sys_hidden=4,
                       fc_sizes=(8, 4), max_seq_len=64, seed=1),
        training=TrainParams(epochs=2, lr=0.003, seed=1),
        duration_ms=0,
    )
    return base.replace(**kw)


@dataclasses.dataclass
class SmallWorld:
    cfg: ExperimentConfig
    train_trace: object
    train_labels: dict
    trace: object
    labels: dict
    models: object
    scorers: ModelScorers


@pytest.fixture(scope="session")
def world() -> SmallWorld:
    cfg = small_config()
    (tr, trl), (te, tel) = trial_traces(cfg.generator, seed=5, n_train_traces=2)
    models = train_models(cfg, tr, trl)
    return SmallWorld(cfg, tr, trl, te, tel, models, ModelScorers(models.forest, models.deep))


def make_window(ngram_seq, density_seq=None, vocab_size=8, label=Label.BENIGN, pid=1,
                index=0, sys_freq=None) -> CompressedWindow:
    density_seq = density_seq or [1] * len(ngram_seq)
    if sys_freq is None:
        sys_freq = np.full(vocab_size, 1.0 / vocab_size)
    return CompressedWindow(pid, tuple(int(x) for x in ngram_seq),
                            tuple(int(d) for d in density_seq), np.asarray(sys_freq, float),
                            index, 0, 1, label)
