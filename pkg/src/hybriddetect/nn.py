"""Layer primitives with explicit backward passes, batch-first ``(B, T, C)``.

Every sequence op takes a ``mask`` of shape ``(B, T)`` (1.0 on real positions,
0.0 on padding) and keeps padded positions at exactly zero, so trailing pad
never changes a result.
"""

from __future__ import annotations

import numpy as np


def centered_offsets(k: int) -> list[int]:
    """Tap offsets of a same-length convolution with odd kernel size ``k``."""
    half = (k - 1) // 2
    return [j - half for j in range(k)]


def dilated_offsets(k: int, rate: int) -> list[int]:
    """Tap offsets ``rate * j`` for ``j = 1..k``; y(i) = sum_j x(i + rate*j) w(j)."""
    return [rate * j for j in range(1, k + 1)]


def _pad(x: np.ndarray, offsets) -> tuple[np.ndarray, int]:
    left = max(0, -min(offsets))
    right = max(0, max(offsets))
    return np.pad(x, ((0, 0), (left, right), (0, 0))), left


def shifted_conv_forward(x, w, b, offsets):
    """y[:, t] = sum_j x[:, t + offsets[j]] @ w[j] + b, zero outside the sequence.

    x: (B, T, Cin); w: (K, Cin, Cout); b: (Cout,).
    """
    T = x.shape[1]
    xp, left = _pad(x, offsets)
    y = np.broadcast_to(b, x.shape[:2] + (w.shape[2],)).copy()
    for j, off in enumerate(offsets):
        y += xp[:, left + off:left + off + T] @ w[j]
    return y, (xp, left, offsets, w)


def shifted_conv_backward(dy, cache):
    xp, left, offsets, w = cache
    T = dy.shape[1]
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    dy2 = dy.reshape(-1, dy.shape[2])
    for j, off in enumerate(offsets):
        xs = xp[:, left + off:left + off + T]
        dw[j] = xs.reshape(-1, xs.shape[2]).T @ dy2
        dxp[:, left + off:left + off + T] += dy @ w[j].T
    db = dy2.sum(axis=0)
    return dxp[:, left:left + T], dw, db


def atrous_conv(x, w, rate, b=None):
    """Dilated convolution, output length equal to input length.

    x: (B, T, Cin) (or (T,) for one channel), w: (K, Cin, Cout) (or (K,)).
    """
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :, None]
        w = np.asarray(w)[:, None, None]
    if b is None:
        b = np.zeros(w.shape[2])
    y, _ = shifted_conv_forward(x, w, b, dilated_offsets(w.shape[0], rate))
    return y[0, :, 0] if squeeze else y


def batchnorm_forward(x, mask, gamma, beta, running_mean, running_var, train: bool,
                      momentum: float = 0.1, eps: float = 1e-5):
    """Masked batch norm over (B, T) per channel.

    In training mode the running statistics are updated in place.
    """
    m = mask[..., None]
    if train:
        n = m.sum()
        mu = (x * m).sum(axis=(0, 1)) / n
        xc = (x - mu) * m
        var = (xc * xc).sum(axis=(0, 1)) / n
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
        cache = (xhat, inv, n, gamma, m)
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv * m
        cache = (xhat, inv, None, gamma, m)
    return (gamma * xhat + beta) * m, cache


def batchnorm_backward(dy, cache):
    xhat, inv, n, gamma, m = cache
    dy = dy * m
    if n is None:
        # inference mode: fixed statistics, an affine map per channel
        return dy * gamma * inv, (dy * xhat).sum(axis=(0, 1)), dy.sum(axis=(0, 1))
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dxhat = dy * gamma
    dx = inv / n * (n * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1)))
    return dx * m, dgamma, dbeta


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_forward(x, mask, W, U, b):
    """One-direction LSTM; state is carried unchanged through masked steps.

    x: (B, T, D); W: (D, 4H); U: (H, 4H); b: (4H,), gate order i, f, g, o.
    Returns hidden states (B, T, H).
    """
    B, T, _ = x.shape
    H = U.shape[0]
    xw = x @ W + b
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, T, H))
    steps = []
    for t in range(T):
        z = xw[:, t] + h @ U
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        cn = f * c + i * g
        tc = np.tanh(cn)
        hn = o * tc
        mt = mask[:, t, None]
        steps.append((h, c, i, f, g, o, tc))
        h = mt * hn + (1 - mt) * h
        c = mt * cn + (1 - mt) * c
        hs[:, t] = h
    return hs, (x, mask, W, U, steps)


def lstm_backward(dhs, cache):
    x, mask, W, U, steps = cache
    B, T, _ = x.shape
    H = U.shape[0]
    dz_all = np.empty((B, T, 4 * H))
    dU = np.zeros_like(U)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h_prev, c_prev, i, f, g, o, tc = steps[t]
        mt = mask[:, t, None]
        dh = dh + dhs[:, t]
        dhn = mt * dh
        dcn = mt * dc + dhn * o * (1 - tc * tc)
        dz = np.concatenate([
            dcn * g * i * (1 - i),
            dcn * c_prev * f * (1 - f),
            dcn * i * (1 - g * g),
            dhn * tc * o * (1 - o),
        ], axis=1)
        dz_all[:, t] = dz
        dU += h_prev.T @ dz
        dh = dz @ U.T + (1 - mt) * dh
        dc = dcn * f + (1 - mt) * dc
    dz2 = dz_all.reshape(-1, 4 * H)
    dW = x.reshape(-1, x.shape[2]).T @ dz2
    db = dz2.sum(axis=0)
    dx = dz_all @ W.T
    return dx, dW, dU, db


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
