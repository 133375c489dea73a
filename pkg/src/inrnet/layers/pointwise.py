"""Pointwise layers, normalization, global pooling and multi-scale resampling."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .. import autodiff as ad
from ..autodiff import Value
from ..errors import ShapeError
from ..pointset import PointSet, qmc_mean
from .conv import _check_rows, _unbatch, batched
from .geometry import stride_points, upsample_points

NORM_EPS = 1e-5


def normalized_weights(w) -> Value:
    """Columns rescaled to sum to one."""
    w = ad.as_value(w)
    return w / w.sum(axis=0, keepdims=True)


def linear_combination(values, w, b=None, normalized: bool = False) -> Value:
    """Pointwise channel mixing ``g_j = sum_i W_ij f_i + b_j`` (a 1x1 convolution)."""
    f, was_2d = batched(values)
    w = ad.as_value(w)
    if w.ndim != 2 or w.shape[0] != f.shape[2]:
        raise ShapeError(f"weights {w.shape} do not match {f.shape[2]} input channels")
    if normalized:
        w = normalized_weights(w)
    out = ad.matmul(f, w)
    if b is not None:
        b = ad.as_value(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"bias {b.shape} does not match {w.shape[1]} output channels")
        out = out + b
    return _unbatch(out, was_2d)


def _safe_sqrt(v: Value) -> Value:
    out = np.sqrt(v.data)
    inv = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
    return Value.custom(out, (v,), "safe_sqrt", lambda g: (g * inv,))


class NormState:
    """Running statistics of batch normalization."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum


def normalize(values, ps: PointSet, mode: str = "instance", scale=None, shift=None,
              state: Optional[NormState] = None, training: bool = True) -> Value:
    """Instance or batch normalization with QMC channel statistics.

    ``g = (f - mu) / (sigma + eps) * scale + shift``. In batch mode the
    statistics are averaged over the minibatch while training and the running
    averages in ``state`` are used otherwise.
    """
    f, was_2d = batched(values)
    _check_rows(f, ps)
    if mode not in ("instance", "batch"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    if mode == "batch" and state is not None and not training:
        mu = Value(state.mean.astype(f.dtype))
        sigma = Value(np.sqrt(state.var).astype(f.dtype))
    else:
        mu = qmc_mean(f)  # (B, c)
        sq = qmc_mean(f * f)
        if mode == "batch":
            mu, sq = mu.mean(axis=0, keepdims=True), sq.mean(axis=0, keepdims=True)
        var = ad.maximum(sq - mu * mu, 0.0)
        sigma = _safe_sqrt(var)
        if mode == "batch" and state is not None:
            m = state.momentum
            state.mean = (1 - m) * state.mean + m * mu.data[0].astype(np.float64)
            state.var = (1 - m) * state.var + m * var.data[0].astype(np.float64)
        mu = mu.reshape(mu.shape[0], 1, mu.shape[1])
        sigma = sigma.reshape(sigma.shape[0], 1, sigma.shape[1])
    out = (f - mu) / (sigma + NORM_EPS)
    if scale is not None:
        out = out * scale
    if shift is not None:
        out = out + shift
    return _unbatch(out, was_2d)


def activation(values, kind: str = "relu") -> Value:
    if kind != "relu":
        raise ValueError(f"unsupported activation {kind!r}")
    return ad.as_value(values).relu()


def positional_encoding(values, ps: PointSet, n_freq: int) -> Value:
    """Append ``sin(2^k pi x_i)`` and ``cos(2^k pi x_i)`` channels, k < n_freq."""
    f, was_2d = batched(values)
    _check_rows(f, ps)
    x = ps.points
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    ang = (x[:, :, None] * freqs).reshape(ps.n, -1)
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(f.dtype)
    enc = np.broadcast_to(enc, (f.shape[0],) + enc.shape).copy()
    return _unbatch(ad.concat([f, Value(enc)], axis=-1), was_2d)


def global_pool(values, ps: PointSet) -> Value:
    """QMC mean of each channel: (B, N, c) -> (B, c)."""
    f, was_2d = batched(values)
    _check_rows(f, ps)
    out = qmc_mean(f, ps)
    return out.reshape(out.shape[1]) if was_2d else out


def downsample(values, ps: PointSet, level: int):
    """Keep the samples of the coarser point set (a prefix for sequences)."""
    f, was_2d = batched(values)
    _check_rows(f, ps)
    small = stride_points(ps, level)
    if small is ps:
        return _unbatch(f, was_2d), ps
    kept = small._cache["parent"][2]
    if np.array_equal(kept, np.arange(len(kept))):
        out = f[:, : len(kept)]
    else:
        out = f.take(kept, axis=1)
    return _unbatch(out, was_2d), small


def upsample(values, ps: PointSet, level: int):
    """Nearest-sample interpolation onto the finer point set."""
    f, was_2d = batched(values)
    _check_rows(f, ps)
    big, nn_map = upsample_points(ps, level)
    if big is ps:
        return _unbatch(f, was_2d), ps
    return _unbatch(f.take(nn_map, axis=1), was_2d), big
