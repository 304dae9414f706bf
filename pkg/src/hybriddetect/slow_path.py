"""DeepMalware: multi-stream sequence classifier (the slow path).

Streams and layers, in order:

* n-gram sequence -> embedding -> parallel same-length Conv3/Conv5/Conv7 ->
  concatenation -> batch norm -> ReLU -> two dilated (atrous) convolutions,
  each followed by batch norm and ReLU;
* density sequence -> log(1 + d) -> linear projection to the conv output
  width, fused with the conv stream by element-wise multiplication;
* fused sequence -> stacked bidirectional LSTMs, summarised by the final
  forward and backward states plus masked mean and max over the top outputs;
* system-wide frequency vector -> dense layer + ReLU;
* both summaries concatenated -> three dense layers -> 2-way softmax.

Gradients are computed by hand; :func:`finite_difference_gradients` is the
independent check.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .reconstruction import CompressedWindow, Vocabulary
from .trace import Label

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class InputError(ValueError):
    pass


class TrainingDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DeepMalwareConfig:
    vocab_size: int
    embed_dim: int = 16
    conv_channels: int = 8
    kernel_sizes: tuple[int, ...] = (3, 5, 7)
    atrous_kernel: int = 3
    atrous_rates: tuple[int, ...] = (2, 4)
    lstm_layers: int = 1
    lstm_hidden: int = 16
    sys_hidden: int = 16
    # hidden widths of the head; a final layer maps to the two classes
    fc_sizes: tuple[int, ...] = (32, 16)
    max_seq_len: int = 128
    # also summarise the top BiLSTM outputs by masked mean and max over time
    pool_summary: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(self.kernel_sizes))
        object.__setattr__(self, "atrous_rates", tuple(self.atrous_rates))
        object.__setattr__(self, "fc_sizes", tuple(self.fc_sizes))
        ints = [self.vocab_size, self.embed_dim, self.conv_channels, self.atrous_kernel,
                self.lstm_layers, self.lstm_hidden, self.sys_hidden, self.max_seq_len,
                *self.kernel_sizes, *self.atrous_rates, *self.fc_sizes]
        if min(ints) < 1:
            raise ValueError("all sizes must be positive")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError("kernel sizes must be odd")

    @classmethod
    def full_scale(cls, vocab_size: int, **kw) -> "DeepMalwareConfig":
        """GPU-scale layer sizes: 256-wide embedding, 4 BiLSTM layers."""
        kw.setdefault("embed_dim", 256)
        kw.setdefault("lstm_layers", 4)
        return cls(vocab_size=vocab_size, **kw)

    @property
    def conv_width(self) -> int:
        return self.conv_channels * len(self.kernel_sizes)

    @property
    def summary_width(self) -> int:
        return 2 * self.lstm_hidden * (3 if self.pool_summary else 1)


def _glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


@dataclass
class DeepMalwareModel:
    config: DeepMalwareConfig
    params: "OrderedDict[str, np.ndarray]"
    buffers: "OrderedDict[str, np.ndarray]"
    vocabulary: Vocabulary | None = None
    train_mode: bool = field(default=False, repr=False)

    @classmethod
    def init(cls, config: DeepMalwareConfig, vocabulary: Vocabulary | None = None) -> "DeepMalwareModel":
        if vocabulary is not None and vocabulary.size != config.vocab_size:
            raise ValueError("vocabulary size does not match config.vocab_size")
        rng = np.random.default_rng([config.seed, 11])
        c = config
        p: OrderedDict[str, np.ndarray] = OrderedDict()
        b: OrderedDict[str, np.ndarray] = OrderedDict()
        p["embed"] = rng.normal(0.0, 0.5, size=(c.vocab_size, c.embed_dim))
        for k in c.kernel_sizes:
            p[f"conv{k}.w"] = _glorot(rng, k * c.embed_dim, c.conv_channels, (k, c.embed_dim, c.conv_channels))
            p[f"conv{k}.b"] = np.zeros(c.conv_channels)
        D = c.conv_width

        def bn(name):
            p[f"{name}.gamma"] = np.ones(D)
            p[f"{name}.beta"] = np.zeros(D)
            b[f"{name}.mean"] = np.zeros(D)
            b[f"{name}.var"] = np.ones(D)

        bn("bn0")
        for j, _ in enumerate(c.atrous_rates):
            p[f"atrous{j}.w"] = _glorot(rng, c.atrous_kernel * D, D, (c.atrous_kernel, D, D))
            p[f"atrous{j}.b"] = np.zeros(D)
            bn(f"bn{j + 1}")
        p["density.w"] = rng.normal(0.0, 0.5, size=D)
        p["density.b"] = np.ones(D)
        H = c.lstm_hidden
        for layer in range(c.lstm_layers):
            d_in = D if layer == 0 else 2 * H
            for direction in ("fw", "bw"):
                pre = f"lstm{layer}.{direction}"
                p[f"{pre}.W"] = _glorot(rng, d_in, 4 * H, (d_in, 4 * H))
                p[f"{pre}.U"] = _glorot(rng, H, 4 * H, (H, 4 * H))
                bias = np.zeros(4 * H)
                bias[H:2 * H] = 1.0
                p[f"{pre}.b"] = bias
        p["sys.W"] = _glorot(rng, c.vocab_size, c.sys_hidden, (c.vocab_size, c.sys_hidden))
        p["sys.b"] = np.zeros(c.sys_hidden)
        widths = [c.summary_width + c.sys_hidden, *c.fc_sizes, 2]
        for j in range(len(widths) - 1):
            p[f"fc{j}.W"] = _glorot(rng, widths[j], widths[j + 1], (widths[j], widths[j + 1]))
            p[f"fc{j}.b"] = np.zeros(widths[j + 1])
        return cls(config, p, b, vocabulary)

    def copy(self) -> "DeepMalwareModel":
        return DeepMalwareModel(self.config,
                                OrderedDict((k, v.copy()) for k, v in self.params.items()),
                                OrderedDict((k, v.copy()) for k, v in self.buffers.items()),
                                self.vocabulary)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat_params(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        pos = 0
        for v in self.params.values():
            v[...] = flat[pos:pos + v.size].reshape(v.shape)
            pos += v.size

    def zero_(self) -> None:
        for v in self.params.values():
            v[...] = 0.0

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.dumps())

    def dumps(self) -> bytes:
        meta = {
            "format": "deepmalware",
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "param_shapes": [[k, list(v.shape)] for k, v in self.params.items()],
            "buffer_shapes": [[k, list(v.shape)] for k, v in self.buffers.items()],
            "vocabulary": None if self.vocabulary is None else self.vocabulary.to_json(),
        }
        arrays = {"meta": np.array(json.dumps(meta)), "params": self.flat_params(),
                  "buffers": np.concatenate([v.ravel() for v in self.buffers.values()])}
        buf = io.BytesIO()
        # an npz archive with fixed entry timestamps, so equal models give equal bytes
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
            for name, arr in arrays.items():
                info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
                with zf.open(info, "w") as fh:
                    np.lib.format.write_array(fh, arr, allow_pickle=False)
        return buf.getvalue()

    @classmethod
    def loads(cls, data: bytes) -> "DeepMalwareModel":
        with np.load(io.BytesIO(data)) as z:
            meta = json.loads(str(z["meta"]))
            flat, bflat = z["params"], z["buffers"]
        if meta.get("format") != "deepmalware" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a DeepMalware checkpoint of a supported version")

        def unpack(shapes, flat):
            out, pos = OrderedDict(), 0
            for name, shape in shapes:
                size = int(np.prod(shape))
                out[name] = flat[pos:pos + size].reshape(shape).copy()
                pos += size
            return out

        vocab = None if meta["vocabulary"] is None else Vocabulary.from_json(meta["vocabulary"])
        return cls(DeepMalwareConfig(**meta["config"]), unpack(meta["param_shapes"], flat),
                   unpack(meta["buffer_shapes"], bflat), vocab)

    @classmethod
    def load(cls, path) -> "DeepMalwareModel":
        with open(path, "rb") as fh:
            return cls.loads(fh.read())


@dataclass
class Batch:
    idx: np.ndarray      # (B, T) int
    density: np.ndarray  # (B, T) float
    mask: np.ndarray     # (B, T) float
    sys_freq: np.ndarray  # (B, V)

    def __len__(self) -> int:
        return self.idx.shape[0]


def encode_windows(windows: Sequence[CompressedWindow], config: DeepMalwareConfig,
                   pad_to: int | None = None) -> Batch:
    """Stack windows into padded arrays, keeping the earliest ``max_seq_len`` units."""
    T = config.max_seq_len
    lengths = [min(len(w.ngram_seq), T) for w in windows]
    width = max(lengths, default=0) if pad_to is None else pad_to
    if width < max(lengths, default=0):
        raise ValueError("pad_to shorter than a window")
    B = len(windows)
    idx = np.zeros((B, max(width, 1)), dtype=np.int64)
    dens = np.zeros((B, max(width, 1)))
    mask = np.zeros((B, max(width, 1)))
    sysf = np.zeros((B, config.vocab_size))
    for r, (w, n) in enumerate(zip(windows, lengths)):
        seq = np.asarray(w.ngram_seq[:n], dtype=np.int64)
        if seq.size and (seq.min() < 0 or seq.max() >= config.vocab_size):
            raise InputError(f"window {w.key()} has an index outside the vocabulary")
        if w.sys_freq.shape[0] != config.vocab_size:
            raise InputError(f"window {w.key()} sys_freq length {w.sys_freq.shape[0]} "
                             f"!= vocab size {config.vocab_size}")
        idx[r, :n] = seq
        dens[r, :n] = w.density_seq[:n]
        mask[r, :n] = 1.0
        sysf[r] = w.sys_freq
    return Batch(idx, dens, mask, sysf)


def targets(windows: Sequence[CompressedWindow]) -> np.ndarray:
    if any(w.label is None for w in windows):
        raise ValueError("windows must be labelled")
    return np.array([1 if w.label is Label.MALICIOUS else 0 for w in windows])


def _conv_stack(model: DeepMalwareModel, batch: Batch, train: bool, stop_at: int | None = None):
    """Embedding, inception and atrous stages.

    Returns (features, conv caches, stage caches); with ``stop_at=j`` returns
    the input to batch norm ``j`` instead of the features.
    """
    c = model.config
    P = model.params
    m = batch.mask
    m3 = m[..., None]
    emb = P["embed"][batch.idx] * m3
    branches, conv_caches = [], []
    for k in c.kernel_sizes:
        y, cc = nn.shifted_conv_forward(emb, P[f"conv{k}.w"], P[f"conv{k}.b"], nn.centered_offsets(k))
        branches.append(y)
        conv_caches.append(cc)
    h = np.concatenate(branches, axis=2) * m3

    stages = []
    for j in range(len(c.atrous_rates) + 1):
        if j > 0:
            h, ac = nn.shifted_conv_forward(h, P[f"atrous{j - 1}.w"], P[f"atrous{j - 1}.b"],
                                            nn.dilated_offsets(c.atrous_kernel, c.atrous_rates[j - 1]))
            h = h * m3
        else:
            ac = None
        if stop_at == j:
            return h, conv_caches, stages
        name = f"bn{j}"
        h, bc = nn.batchnorm_forward(h, m, P[f"{name}.gamma"], P[f"{name}.beta"],
                                     model.buffers[f"{name}.mean"], model.buffers[f"{name}.var"],
                                     train, c.bn_momentum, c.bn_eps)
        pre_relu = h
        h = np.maximum(h, 0.0)
        stages.append((ac, bc, pre_relu))
    return h, conv_caches, stages


def forward_batch(model: DeepMalwareModel, batch: Batch, train: bool = False):
    """Class probabilities (B, 2) and the activation cache for backward."""
    c = model.config
    P = model.params
    m = batch.mask
    m3 = m[..., None]
    cache: dict = {"batch": batch, "train": train}
    h, cache["conv"], cache["stages"] = _conv_stack(model, batch, train)

    ld = np.log1p(batch.density)[..., None]
    dproj = (ld * P["density.w"] + P["density.b"]) * m3
    fused = h * dproj
    cache["fuse"] = (h, ld, dproj)

    seq = fused
    lstm_caches = []
    for layer in range(c.lstm_layers):
        hf, cf = nn.lstm_forward(seq, m, P[f"lstm{layer}.fw.W"], P[f"lstm{layer}.fw.U"], P[f"lstm{layer}.fw.b"])
        hb_r, cb = nn.lstm_forward(seq[:, ::-1], m[:, ::-1], P[f"lstm{layer}.bw.W"],
                                   P[f"lstm{layer}.bw.U"], P[f"lstm{layer}.bw.b"])
        hb = hb_r[:, ::-1]
        lstm_caches.append((cf, cb))
        last = (hf, hb)
        seq = np.concatenate([hf, hb], axis=2) * m3
    cache["lstm"] = lstm_caches
    parts = [last[0][:, -1], last[1][:, 0]]
    if c.pool_summary:
        lengths = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
        parts.append(seq.sum(axis=1) / lengths)
        masked = np.where(m3 > 0, seq, -np.inf)
        arg = masked.argmax(axis=1)
        parts.append(np.take_along_axis(seq, arg[:, None, :], axis=1)[:, 0])
        cache["pool"] = (lengths, arg)
    seq_summary = np.concatenate(parts, axis=1)

    s_pre = batch.sys_freq @ P["sys.W"] + P["sys.b"]
    s = np.maximum(s_pre, 0.0)
    cache["sys"] = s_pre

    a = np.concatenate([seq_summary, s], axis=1)
    fc_cache = []
    n_fc = len(c.fc_sizes) + 1
    for j in range(n_fc):
        z = a @ P[f"fc{j}.W"] + P[f"fc{j}.b"]
        fc_cache.append((a, z))
        a = np.maximum(z, 0.0) if j < n_fc - 1 else z
    cache["fc"] = fc_cache
    probs = nn.softmax(a)
    cache["probs"] = probs
    return probs, cache


def loss_and_grad_logits(probs: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    B = probs.shape[0]
    loss = -np.mean(np.log(np.clip(probs[np.arange(B), y], 1e-300, None)))
    d = probs.copy()
    d[np.arange(B), y] -= 1.0
    return float(loss), d / B


def backward_batch(model: DeepMalwareModel, cache: dict, y: np.ndarray) -> tuple[float, "OrderedDict[str, np.ndarray]"]:
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    c = model.config
    P = model.params
    g: OrderedDict[str, np.ndarray] = OrderedDict((k, np.zeros_like(v)) for k, v in P.items())
    batch: Batch = cache["batch"]
    m = batch.mask
    m3 = m[..., None]
    loss, da = loss_and_grad_logits(cache["probs"], np.asarray(y))

    n_fc = len(c.fc_sizes) + 1
    for j in range(n_fc - 1, -1, -1):
        a_in, z = cache["fc"][j]
        if j < n_fc - 1:
            da = da * (z > 0)
        g[f"fc{j}.W"] = a_in.T @ da
        g[f"fc{j}.b"] = da.sum(axis=0)
        da = da @ P[f"fc{j}.W"].T

    H2 = 2 * c.lstm_hidden
    d_summary, ds = da[:, :c.summary_width], da[:, c.summary_width:]
    ds = ds * (cache["sys"] > 0)
    g["sys.W"] = batch.sys_freq.T @ ds
    g["sys.b"] = ds.sum(axis=0)

    H = c.lstm_hidden
    B, T = m.shape
    dseq = None
    for layer in range(c.lstm_layers - 1, -1, -1):
        cf, cb = cache["lstm"][layer]
        if dseq is None:
            top = np.zeros((B, T, H2))
            if c.pool_summary:
                lengths, arg = cache["pool"]
                top += (d_summary[:, None, H2:2 * H2] / lengths[:, :, None]) * m3
                np.put_along_axis(top, arg[:, None, :],
                                  np.take_along_axis(top, arg[:, None, :], axis=1)
                                  + d_summary[:, None, 2 * H2:], axis=1)
            dhf = top[:, :, :H].copy()
            dhb = top[:, :, H:].copy()
            dhf[:, -1] += d_summary[:, :H]
            dhb[:, 0] += d_summary[:, H:H2]
        else:
            dseq = dseq * m3
            dhf = dseq[:, :, :H].copy()
            dhb = dseq[:, :, H:].copy()
        dxf, dW, dU, db = nn.lstm_backward(dhf, cf)
        g[f"lstm{layer}.fw.W"], g[f"lstm{layer}.fw.U"], g[f"lstm{layer}.fw.b"] = dW, dU, db
        dxb_r, dW, dU, db = nn.lstm_backward(dhb[:, ::-1], cb)
        g[f"lstm{layer}.bw.W"], g[f"lstm{layer}.bw.U"], g[f"lstm{layer}.bw.b"] = dW, dU, db
        dseq = dxf + dxb_r[:, ::-1]

    h, ld, dproj = cache["fuse"]
    dfused = dseq
    dh = dfused * dproj
    ddproj = dfused * h * m3
    g["density.w"] = (ddproj * ld).sum(axis=(0, 1))
    g["density.b"] = ddproj.sum(axis=(0, 1))

    for j in range(len(c.atrous_rates), -1, -1):
        ac, bc, pre_relu = cache["stages"][j]
        dh = dh * (pre_relu > 0)
        dh, dgamma, dbeta = nn.batchnorm_backward(dh, bc)
        g[f"bn{j}.gamma"], g[f"bn{j}.beta"] = dgamma, dbeta
        if j > 0:
            dh = dh * m3
            dh, dw, db = nn.shifted_conv_backward(dh, ac)
            g[f"atrous{j - 1}.w"], g[f"atrous{j - 1}.b"] = dw, db

    dh = dh * m3
    demb = np.zeros((B, T, c.embed_dim))
    C = c.conv_channels
    for n, k in enumerate(c.kernel_sizes):
        dx, dw, db = nn.shifted_conv_backward(dh[:, :, n * C:(n + 1) * C], cache["conv"][n])
        g[f"conv{k}.w"], g[f"conv{k}.b"] = dw, db
        demb += dx
    demb *= m3
    np.add.at(g["embed"], batch.idx.ravel(), demb.reshape(-1, c.embed_dim))
    return loss, g


def forward(model: DeepMalwareModel, window: CompressedWindow, train: bool = False):
    """(p_malware, cache) for a single window."""
    probs, cache = forward_batch(model, encode_windows([window], model.config), train)
    return float(probs[0, 1]), cache


def backward(model: DeepMalwareModel, cache: dict, label: Label) -> tuple[float, "OrderedDict[str, np.ndarray]"]:
    """Loss and gradients for the window whose ``forward`` produced ``cache``."""
    return backward_batch(model, cache, np.array([1 if label is Label.MALICIOUS else 0]))


def predict(model: DeepMalwareModel, window: CompressedWindow) -> float:
    """Inference-mode malicious probability."""
    return float(predict_batch(model, [window])[0])


def predict_batch(model: DeepMalwareModel, windows: Sequence[CompressedWindow],
                  batch_size: int = 64) -> np.ndarray:
    out = []
    for lo in range(0, len(windows), batch_size):
        probs, _ = forward_batch(model, encode_windows(windows[lo:lo + batch_size], model.config))
        out.append(probs[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def batch_loss(model: DeepMalwareModel, batch: Batch, y: np.ndarray, train: bool = True) -> float:
    """Loss without touching running batch-norm statistics."""
    saved = OrderedDict((k, v.copy()) for k, v in model.buffers.items())
    probs, _ = forward_batch(model, batch, train)
    for k, v in saved.items():
        model.buffers[k][...] = v
    return loss_and_grad_logits(probs, y)[0]


def finite_difference_gradients(model: DeepMalwareModel, batch: Batch, y: np.ndarray,
                                eps: float = 1e-5, names: Sequence[str] | None = None,
                                train: bool = True) -> "OrderedDict[str, np.ndarray]":
    """Central-difference gradient of the batch loss, element by element."""
    out = OrderedDict()
    for name in names or list(model.params):
        v = model.params[name]
        g = np.zeros_like(v)
        flat = v.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = batch_loss(model, batch, y, train)
            flat[i] = old - eps
            down = batch_loss(model, batch, y, train)
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def recalibrate_batchnorm(model: DeepMalwareModel, windows: Sequence[CompressedWindow],
                          chunk: int = 256) -> None:
    """Set running batch-norm statistics to exact masked means/variances over ``windows``.

    Layers are fitted in order, each seeing inputs normalised by the layers
    before it with their freshly fitted statistics.
    """
    c = model.config
    for j in range(len(c.atrous_rates) + 1):
        total = 0.0
        s1 = np.zeros(c.conv_width)
        s2 = np.zeros(c.conv_width)
        for lo in range(0, len(windows), chunk):
            batch = encode_windows(windows[lo:lo + chunk], c)
            x, _, _ = _conv_stack(model, batch, False, stop_at=j)
            m3 = batch.mask[..., None]
            total += batch.mask.sum()
            s1 += (x * m3).sum(axis=(0, 1))
            s2 += (x * x * m3).sum(axis=(0, 1))
        if total == 0:
            return
        mean = s1 / total
        model.buffers[f"bn{j}.mean"][...] = mean
        model.buffers[f"bn{j}.var"][...] = np.maximum(s2 / total - mean * mean, 0.0)


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 8
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    clip_norm: float | None = 5.0
    weight_decay: float = 0.0
    # "sgd" (momentum) or "adam" (momentum is then beta1, beta2 = 0.999)
    optimizer: str = "adam"
    # replace running batch-norm averages by exact training-set statistics
    recalibrate: bool = True
    seed: int = 0


def train(model: DeepMalwareModel, windows: Sequence[CompressedWindow],
          params: TrainParams = TrainParams()) -> tuple[DeepMalwareModel, list[float]]:
    """Mini-batch Adam (or SGD with momentum); returns the model and per-epoch mean loss.

    Batch norm uses batch statistics while training. Afterwards the running
    statistics are refitted on the training windows (unless disabled) and
    then stay frozen for inference.
    """
    if not windows:
        raise ValueError("empty training set")
    y_all = targets(windows)
    rng = np.random.default_rng([params.seed, 13])
    if params.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {params.optimizer!r}")
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    second = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0
    curve: list[float] = []
    n = len(windows)
    for epoch in range(params.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, params.batch_size):
            sel = order[lo:lo + params.batch_size]
            batch = encode_windows([windows[i] for i in sel], model.config)
            _, cache = forward_batch(model, batch, train=True)
            loss, grads = backward_batch(model, cache, y_all[sel])
            if not np.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch}, batch starting {lo} (lr={params.lr})")
            if params.clip_norm is not None:
                norm = np.sqrt(sum(float((gv * gv).sum()) for gv in grads.values()))
                if norm > params.clip_norm:
                    scale = params.clip_norm / norm
                    for gv in grads.values():
                        gv *= scale
            step += 1
            for k, v in model.params.items():
                g = grads[k]
                if params.weight_decay:
                    g = g + params.weight_decay * v
                if params.optimizer == "adam":
                    b1, b2 = params.momentum, 0.999
                    velocity[k] = b1 * velocity[k] + (1 - b1) * g
                    second[k] = b2 * second[k] + (1 - b2) * g * g
                    mhat = velocity[k] / (1 - b1 ** step)
                    vhat = second[k] / (1 - b2 ** step)
                    v -= params.lr * mhat / (np.sqrt(vhat) + 1e-8)
                else:
                    velocity[k] *= params.momentum
                    velocity[k] -= params.lr * g
                    v += velocity[k]
            total += loss * len(sel)
        curve.append(total / n)
        if not all(np.isfinite(v).all() for v in model.params.values()):
            raise TrainingDivergenceError(f"non-finite parameters after epoch {epoch}")
        log.debug("epoch %d loss %.5f", epoch, curve[-1])
    if params.recalibrate:
        recalibrate_batchnorm(model, windows)
    return model, curve
