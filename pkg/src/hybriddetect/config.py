"""Experiment configuration and its flat ``key = value`` file format.

Unprefixed keys set :class:`ExperimentConfig` fields. Prefixed keys reach the
nested configs: ``gen_*`` the trace generator, ``rf_*`` the forest,
``dl_*`` the DeepMalware layer sizes and ``opt_*`` its optimiser. Lines
starting with ``#`` or ``;`` are comments.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field

from .delay import DelayPolicy
from .forest import ForestParams
from .reconstruction import WindowConfig
from .router import BorderlineInterval
from .slow_path import TrainParams
from .trace import ConfigError, GeneratorConfig

MODES = ("offline", "online")
PIPELINES = ("hybrid", "fast_only", "slow_only")


@dataclass(frozen=True)
class DeepSizes:
    """DeepMalware sizes; the vocabulary size comes from the trained vocabulary."""

    embed_dim: int = 16
    conv_channels: int = 8
    kernel_sizes: tuple[int, ...] = (3, 5, 7)
    atrous_kernel: int = 3
    atrous_rates: tuple[int, ...] = (2, 4)
    lstm_layers: int = 1
    lstm_hidden: int = 16
    sys_hidden: int = 16
    fc_sizes: tuple[int, ...] = (32, 16)
    max_seq_len: int = 128
    pool_summary: bool = True
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "online"
    pipeline: str = "hybrid"
    # virtual ms of trace to replay; 0 means the whole trace
    duration_ms: int = 300_000
    window_size: int = 100
    stride: int = 50
    ngram: int = 2
    sys_freq_raw: bool = False
    exclude_self: bool = False
    lower: float = 0.3
    upper: float = 0.7
    max_roundtrips: int = 3
    fast_only_threshold: float = 0.5
    slow_threshold: float = 0.5
    fast_cost_ms: float = 1.0
    slow_cost_ms: float = 100.0
    observe_only: bool = False
    delay: bool = True
    delay_threshold: float = 0.1
    delay_sleep_ms: int = 50
    delay_seed: int = 0
    # "default" or comma-separated syscall ids
    delay_targets: str = "default"
    trace: str = "trace.tsv"
    labels: str = "labels.tsv"
    train_trace: str = "train_trace.tsv"
    train_labels: str = "train_labels.tsv"
    # generate writes this many independent runs, back to back, as training data
    train_traces: int = 10
    fast_model: str = "fast_model.json"
    slow_model: str = "slow_model.npz"
    verdict_log: str = "verdicts.tsv"
    report_json: str = "report.json"
    process_csv: str = "processes.csv"
    run_summary: str = "run_summary.json"
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    forest: ForestParams = field(default_factory=ForestParams)
    deep: DeepSizes = field(default_factory=DeepSizes)
    training: TrainParams = field(default_factory=TrainParams)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}")
        if self.duration_ms < 0:
            raise ConfigError("duration_ms must be >= 0 (0 = unlimited)")
        if self.train_traces < 0:
            raise ConfigError("train_traces must be >= 0")
        if self.fast_cost_ms < 0 or self.slow_cost_ms < 0:
            raise ConfigError("classification costs must be >= 0")
        try:
            self.window_config
            self.interval
            self.delay_policy
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def duration(self) -> int | None:
        return self.duration_ms or None

    @property
    def window_config(self) -> WindowConfig:
        return WindowConfig(self.window_size, self.stride, self.ngram,
                            self.sys_freq_raw, self.exclude_self)

    @property
    def interval(self) -> BorderlineInterval:
        return BorderlineInterval(self.lower, self.upper)

    @property
    def delay_policy(self) -> DelayPolicy:
        kw = dict(threshold=self.delay_threshold, sleep_ms=self.delay_sleep_ms, seed=self.delay_seed)
        if self.delay_targets.strip() == "default":
            return DelayPolicy(**kw)
        ids = [int(x) for x in self.delay_targets.split(",") if x.strip()]
        return DelayPolicy.from_ids(ids, **kw)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {"gen_": "generator", "rf_": "forest", "dl_": "deep", "opt_": "training"}


def _coerce(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        return _coerce(raw, inner[0], key)
    if hint is bool:
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if origin is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw.strip()


def _build(cls, values: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key {prefix}{key}")
        kw[key] = _coerce(raw, hints[key], prefix + key)
    return kw


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[experiment]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    flat = dict(cp["experiment"])
    top: dict[str, str] = {}
    nested: dict[str, dict[str, str]] = {name: {} for name in _NESTED.values()}
    for key, raw in flat.items():
        for prefix, name in _NESTED.items():
            if key.startswith(prefix):
                nested[name][key[len(prefix):]] = raw
                break
        else:
            if key in _NESTED.values():
                raise ConfigError(f"unknown config key {key}")
            top[key] = raw
    kw = _build(ExperimentConfig, top)
    classes = {"generator": GeneratorConfig, "forest": ForestParams,
               "deep": DeepSizes, "training": TrainParams}
    prefixes = {v: k for k, v in _NESTED.items()}
    try:
        for name, cls in classes.items():
            kw[name] = cls(**_build(cls, nested[name], prefixes[name]))
        cfg = ExperimentConfig(**kw)
        cfg.generator.validate()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Flat text that :func:`parse_config` reads back to an equal config."""
    lines = []
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            continue
        lines.append(f"{f.name} = {_fmt(v)}")
    for prefix, name in _NESTED.items():
        sub = getattr(cfg, name)
        for f in dataclasses.fields(sub):
            lines.append(f"{prefix}{f.name} = {_fmt(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"
