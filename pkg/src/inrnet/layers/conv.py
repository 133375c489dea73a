"""Continuous convolution and pooling estimated on point sets.

Every windowed layer computes, for each output sample x,

    out(x) = w * sum_{j : x_j - x in S} K(x_j - x) f(x_j) + b

where ``w`` is the integration weight of one sample (``vol / N``, or the
pixel area on a lattice). Samples outside the domain contribute nothing,
which is how zero padding arises.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.sparse as sp

from .. import autodiff as ad
from ..autodiff import Value
from ..errors import ShapeError
from ..pointset import PointSet
from .geometry import STATS, neighborhood
from .kernels import KernelSpline, Support, VoronoiBins


def batched(values) -> tuple:
    """Return ``(Value of shape (B, N, c), was_2d)``."""
    v = ad.as_value(values)
    if v.ndim == 2:
        return v.reshape(1, *v.shape), True
    if v.ndim != 3:
        raise ShapeError(f"expected values of shape (N, c) or (B, N, c), got {v.shape}")
    return v, False


def _unbatch(v: Value, was_2d: bool) -> Value:
    return v.reshape(*v.shape[1:]) if was_2d else v


def _check_rows(v: Value, ps: PointSet):
    if v.shape[1] != ps.n:
        raise ShapeError(f"values have {v.shape[1]} samples, point set has {ps.n}")


def _count_starved(nb) -> None:
    starved = int(np.sum(nb.counts() == 0))
    if starved:
        STATS["starved"] += starved


def _weight_matrix(nb, cols: np.ndarray, n_cols: int, vals: np.ndarray) -> sp.csr_matrix:
    """Sparse (n_out * n_cols, n_in) matrix, rows indexed ``dst * n_cols + col``."""
    rows = nb.dst[:, None] * n_cols + cols
    return sp.csr_matrix(
        (vals.ravel(), (rows.ravel(), np.broadcast_to(nb.src[:, None], rows.shape).ravel())),
        shape=(nb.n_out * n_cols, nb.n_in),
    )


def _contract(mat: sp.csr_matrix, f: Value, k_table: Value, n_out: int) -> Value:
    """(B, N, ci) -> (B, M, co) through ``mat`` and a (Q, ci, co) kernel table."""
    q, ci, co = k_table.shape
    agg = ad.sparse_apply(mat, f, axis=1).reshape(f.shape[0], n_out, q * ci)
    return ad.matmul(agg, k_table.reshape(q * ci, co))


def conv_forward(values, ps: PointSet, kernel, bias=None, padding: str = "zero",
                 stride_level: int = 0):
    """Exact continuous convolution; returns ``(values', ps')``.

    ``kernel`` is a :class:`KernelSpline`, an :class:`MlpKernel`, or any object
    with ``support``, ``c_in``, ``c_out`` and ``values(offsets) -> (P, ci, co)``
    density values.
    """
    f, was_2d = batched(values)
    _check_rows(f, ps)
    if f.shape[2] != kernel.c_in:
        raise ShapeError(f"kernel expects {kernel.c_in} channels, values have {f.shape[2]}")
    nb = neighborhood(ps, kernel.support, padding, stride_level)
    _count_starved(nb)
    w = ps.cell_volume
    if isinstance(kernel, KernelSpline):
        ckey = ("spline", kernel.k, kernel.pitch, kernel.pad, kernel.order, w)
        if ckey not in nb.cache:
            basis = kernel.basis(nb.offsets) * (w * kernel.density_scale)
            q = basis.shape[1]
            nb.cache[ckey] = _weight_matrix(nb, np.arange(q)[None, :].repeat(len(basis), 0), q, basis)
        out = _contract(nb.cache[ckey], f, kernel.control, nb.n_out)
    else:
        # one kernel evaluation per (output, source) pair
        kp = kernel.values(nb.offsets)  # (P, ci, co)
        msg = ad.matmul(f.take(nb.src, axis=1).reshape(f.shape[0], nb.n_pairs, 1, kernel.c_in),
                        kp).reshape(f.shape[0], nb.n_pairs, kernel.c_out)
        skey = ("segment", w)
        if skey not in nb.cache:
            nb.cache[skey] = sp.csr_matrix(
                (np.full(nb.n_pairs, w), (nb.dst, np.arange(nb.n_pairs))),
                shape=(nb.n_out, nb.n_pairs))
        out = ad.sparse_apply(nb.cache[skey], msg, axis=1)
    if bias is not None:
        out = out + bias
    return _unbatch(out, was_2d), nb.ps_out


def conv_binned(values, ps: PointSet, kernel, bins: VoronoiBins, bias=None, padding: str = "zero",
                stride_level: int = 0):
    """Convolution with the kernel frozen at one seed offset per Voronoi cell.

    The kernel is evaluated ``bins.n_bins`` times, independent of N.
    """
    f, was_2d = batched(values)
    _check_rows(f, ps)
    if f.shape[2] != kernel.c_in:
        raise ShapeError(f"kernel expects {kernel.c_in} channels, values have {f.shape[2]}")
    nb = neighborhood(ps, kernel.support, padding, stride_level)
    _count_starved(nb)
    w = ps.cell_volume
    bkey = ("bins", bins.key, w)
    if bkey not in nb.cache:
        cell = bins.assign(nb.offsets)
        nb.cache[bkey] = _weight_matrix(nb, cell[:, None], bins.n_bins, np.full((nb.n_pairs, 1), w))
    k_seed = kernel.values(bins.seeds)  # (n_bins, ci, co)
    out = _contract(nb.cache[bkey], f, k_seed, nb.n_out)
    if bias is not None:
        out = out + bias
    return _unbatch(out, was_2d), nb.ps_out


class ConstantKernel:
    """``K = value`` on its support (a box filter when value = 1/vol(S))."""

    def __init__(self, support: Support, value: float = 1.0, c_in: int = 1, c_out: int = 1):
        self.support, self.value, self.c_in, self.c_out = support, float(value), c_in, c_out

    def values(self, offsets: np.ndarray) -> Value:
        off = np.atleast_2d(offsets)
        inside = self.support.contains(off).astype(np.float64) * self.value
        return Value(np.broadcast_to(inside[:, None, None], (len(off), self.c_in, self.c_out)).copy())


def window_support(k, pitch, pad=None) -> Support:
    """Pixel window of ``k`` taps; even windows are shifted by half a pixel."""
    k = (k, k) if np.isscalar(k) else tuple(k)
    pitch = (pitch, pitch) if np.isscalar(pitch) else tuple(pitch)
    return Support.for_taps(k, pitch, [0] * len(k) if pad is None and all(kk % 2 == 0 for kk in k) else pad)


def avg_pool(values, ps: PointSet, window: Support, stride_level: int = 1, padding: str = "none"):
    """Depthwise box-filter convolution (K = 1/vol(window)) followed by a stride."""
    f, was_2d = batched(values)
    _check_rows(f, ps)
    nb = neighborhood(ps, window, padding, stride_level)
    _count_starved(nb)
    key = ("avg", ps.cell_volume)
    if key not in nb.cache:
        nb.cache[key] = sp.csr_matrix(
            (np.full(nb.n_pairs, ps.cell_volume / window.volume), (nb.dst, nb.src)),
            shape=(nb.n_out, nb.n_in))
    return _unbatch(ad.sparse_apply(nb.cache[key], f, axis=1), was_2d), nb.ps_out


def _segment_max(data: np.ndarray, dst: np.ndarray, n_out: int):
    """Max over pairs grouped by sorted ``dst``; (B, P, c) -> (B, M, c), argmax positions."""
    b, p, c = data.shape
    out = np.zeros((b, n_out, c), dtype=data.dtype)
    arg = np.full((b, n_out, c), -1, dtype=np.int64)
    if p == 0:
        return out, arg
    starts = np.flatnonzero(np.r_[True, dst[1:] != dst[:-1]])
    seg = dst[starts]
    mx = np.maximum.reduceat(data, starts, axis=1)
    out[:, seg] = mx
    # first position attaining the max (lowest source index on ties)
    seg_of = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, p]))
    hit = data == mx[:, seg_of]
    pos = np.where(hit, np.arange(p)[None, :, None], p)
    first = np.minimum.reduceat(pos, starts, axis=1)
    arg[:, seg] = first
    return out, arg


def max_pool(values, ps: PointSet, window: Support, stride_level: int = 1, calibrate: bool = False,
             constant: float = 1.0, padding: str = "none"):
    """Window maximum; optionally rescaled by ``constant * (N_w + 1) / (N_w - 1)``.

    The rescaling only applies when the window holds at least two samples and
    the maximum is positive.
    """
    f, was_2d = batched(values)
    _check_rows(f, ps)
    nb = neighborhood(ps, window, padding, stride_level)
    counts = nb.counts()
    _count_starved(nb)
    gathered = f.data[:, nb.src]
    mx, arg = _segment_max(gathered, nb.dst, nb.n_out)
    scale = np.ones_like(mx)
    if calibrate:
        n_w = counts[None, :, None].astype(np.float64)
        factor = np.where(n_w >= 2, constant * (n_w + 1) / np.maximum(n_w - 1, 1), 1.0)
        scale = np.where(mx > 0, factor, 1.0).astype(mx.dtype)
    src_of_pair = nb.src

    def backward(g):
        gf = np.zeros(f.shape, dtype=g.dtype)
        bi, mi, ci = np.nonzero(arg >= 0)
        np.add.at(gf, (bi, src_of_pair[arg[bi, mi, ci]], ci), (g * scale)[bi, mi, ci])
        return (gf,)

    out = Value.custom((mx * scale).astype(f.dtype), (f,), "max_pool", backward)
    return _unbatch(out, was_2d), nb.ps_out
