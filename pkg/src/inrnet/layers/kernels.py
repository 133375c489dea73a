"""Convolution kernels on compact box supports.

Offsets are ``x_source - x_output`` in domain units. Both kernel families are
parameterized on the normalized offset ``u = offset / pitch`` (``pitch`` is
the nominal pixel size of the kernel) and return a density, i.e. their raw
value divided by the pixel volume, so that a sum over one sample per pixel
reproduces a discrete convolution.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .. import autodiff as ad
from ..autodiff import Value
from ..pointset import Domain, sobol_sequence


# ----------------------------------------------------------------------------
# B-splines
# ----------------------------------------------------------------------------


def interp_knots(sites: np.ndarray, order: int) -> np.ndarray:
    """Clamped knot vector for interpolation at ``sites`` (knot averaging)."""
    sites = np.asarray(sites, dtype=np.float64)
    p = order - 1
    n = len(sites)
    if n < order:
        raise ValueError(f"{n} sites cannot carry an order-{order} spline")
    inner = [sites[j : j + p].mean() for j in range(1, n - p)]
    return np.concatenate([np.repeat(sites[0], order), inner, np.repeat(sites[-1], order)])


def find_span(t: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    p = order - 1
    n_ctrl = len(knots) - order
    span = np.searchsorted(knots, t, side="right") - 1
    return np.clip(span, p, n_ctrl - 1)


def de_boor(t, knots: np.ndarray, ctrl: np.ndarray, order: int) -> np.ndarray:
    """Evaluate a B-spline with de Boor's algorithm.

    ``ctrl`` has shape (n_ctrl, ...); the result has shape t.shape + ctrl.shape[1:].
    Parameters are clamped to the knot range.
    """
    t = np.clip(np.asarray(t, dtype=np.float64), knots[0], knots[-1])
    flat = t.reshape(-1)
    p = order - 1
    ctrl = np.asarray(ctrl, dtype=np.float64)
    span = find_span(flat, knots, order)
    # d[:, j] = ctrl[span - p + j]
    d = np.stack([ctrl[span - p + j] for j in range(p + 1)], axis=1)
    extra = (1,) * (ctrl.ndim - 1)
    for r in range(1, p + 1):
        for j in range(p, r - 1, -1):
            i = span - p + j
            left = knots[i]
            right = knots[i + p + 1 - r]
            denom = right - left
            alpha = np.where(denom > 0, (flat - left) / np.where(denom > 0, denom, 1.0), 0.0)
            alpha = alpha.reshape((-1,) + extra)
            d[:, j] = (1.0 - alpha) * d[:, j - 1] + alpha * d[:, j]
    return d[:, p].reshape(t.shape + ctrl.shape[1:])


def basis_matrix(t, knots: np.ndarray, order: int) -> np.ndarray:
    """Values of every basis function at ``t``: shape (len(t), n_ctrl)."""
    n_ctrl = len(knots) - order
    return de_boor(np.asarray(t).reshape(-1), knots, np.eye(n_ctrl), order)


def interpolating_control(sites: np.ndarray, values: np.ndarray, order: int) -> np.ndarray:
    """Control points whose spline passes through ``values`` at ``sites`` (axis 0)."""
    knots = interp_knots(sites, order)
    colloc = basis_matrix(sites, knots, order)
    values = np.asarray(values, dtype=np.float64)
    if order == 2:
        return values.copy()  # hat basis: collocation matrix is the identity
    flat = values.reshape(len(sites), -1)
    return np.linalg.solve(colloc, flat).reshape(values.shape)


def spline_order_for(k: int) -> int:
    """Linear splines up to 3 taps, quadratic beyond."""
    return 2 if k <= 3 else 3


# ----------------------------------------------------------------------------
# supports and kernels
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Support:
    """Half-open box ``[lo, hi)`` in offset space."""

    lo: tuple
    hi: tuple

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))

    def contains(self, off: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.all((off >= lo - tol) & (off < hi - tol), axis=-1)

    @classmethod
    def for_taps(cls, k: Sequence[int], pitch: Sequence[float], pad: Optional[Sequence[int]] = None):
        """Support covering pixel taps ``-pad .. k-1-pad`` (half a pixel beyond each)."""
        pad = [(kk - 1) // 2 for kk in k] if pad is None else list(pad)
        lo = tuple((-p - 0.5) * h for p, h in zip(pad, pitch))
        hi = tuple((kk - p - 0.5) * h for kk, p, h in zip(k, pad, pitch))
        return cls(lo, hi)


class KernelSpline:
    """Tensor-product B-spline kernel interpolating a (ky, kx) tap grid.

    Control values have shape (ky * kx, c_in, c_out), index ``a * kx + b``
    for row tap ``a`` (y) and column tap ``b`` (x). Taps sit at integer
    normalized offsets ``-pad .. k-1-pad``; an even tap count therefore
    shifts the support by half a pixel.
    """

    def __init__(self, k, c_in: int, c_out: int, pitch, control=None, order: Optional[int] = None,
                 pad=None, seed: int = 0):
        self.k = (k, k) if np.isscalar(k) else tuple(k)  # (kx, ky)
        self.pitch = (pitch, pitch) if np.isscalar(pitch) else tuple(float(p) for p in pitch)
        self.pad = tuple((kk - 1) // 2 for kk in self.k) if pad is None else tuple(pad)
        self.order = order or spline_order_for(max(self.k))
        self.c_in, self.c_out = c_in, c_out
        self.sites = [np.arange(kk, dtype=np.float64) - p for kk, p in zip(self.k, self.pad)]
        self.knots = [interp_knots(s, min(self.order, len(s))) if len(s) > 1 else None for s in self.sites]
        kx, ky = self.k
        if control is None:
            rng = np.random.default_rng(seed)
            bound = np.sqrt(6.0 / (c_in * kx * ky))
            control = rng.uniform(-bound, bound, size=(ky * kx, c_in, c_out))
        self.control = control if isinstance(control, Value) else ad.parameter(control)
        self.support = Support.for_taps(self.k, self.pitch, self.pad)

    @property
    def even_shift(self) -> bool:
        return any(kk % 2 == 0 for kk in self.k)

    @classmethod
    def from_weights(cls, weights: np.ndarray, pitch, pad=None, order: Optional[int] = None):
        """Interpolate discrete weights of shape (c_out, c_in, ky, kx)."""
        w = np.asarray(weights, dtype=np.float64)
        c_out, c_in, ky, kx = w.shape
        ker = cls((kx, ky), c_in, c_out, pitch, control=np.zeros((ky * kx, c_in, c_out)),
                  order=order, pad=pad)
        grid = w.transpose(2, 3, 1, 0)  # (ky, kx, c_in, c_out)
        if ky > 1:
            grid = interpolating_control(ker.sites[1], grid, min(ker.order, ky))
        if kx > 1:
            grid = np.moveaxis(interpolating_control(ker.sites[0], np.moveaxis(grid, 1, 0),
                                                     min(ker.order, kx)), 0, 1)
        ker.control = ad.parameter(grid.reshape(ky * kx, c_in, c_out))
        return ker

    def _axis_basis(self, u: np.ndarray, axis: int) -> np.ndarray:
        if self.k[axis] == 1:
            return np.ones((len(u), 1))
        return basis_matrix(u, self.knots[axis], min(self.order, self.k[axis]))

    def basis(self, offsets: np.ndarray) -> np.ndarray:
        """(P, ky * kx) basis weights at physical offsets (no density scaling)."""
        off = np.atleast_2d(offsets)
        bx = self._axis_basis(off[:, 0] / self.pitch[0], 0)
        by = self._axis_basis(off[:, 1] / self.pitch[1], 1)
        return (by[:, :, None] * bx[:, None, :]).reshape(len(off), -1)

    @property
    def density_scale(self) -> float:
        return 1.0 / float(np.prod(self.pitch))

    def taps(self, u: np.ndarray) -> np.ndarray:
        """Interpolated weights at normalized offsets u (P, 2): shape (P, c_in, c_out)."""
        u = np.atleast_2d(u)
        b = self.basis(u * np.asarray(self.pitch))
        return np.einsum("pq,qio->pio", b, self.control.data.astype(np.float64))

    def values(self, offsets: np.ndarray) -> Value:
        """Kernel density at physical offsets as a differentiable (P, c_in, c_out) value."""
        b = Value(self.basis(offsets) * self.density_scale)
        q = self.control.shape[0]
        flat = self.control.reshape(q, self.c_in * self.c_out)
        return ad.matmul(b, flat).reshape(len(b.data), self.c_in, self.c_out)

    def params(self) -> list:
        return [self.control]


class MlpKernel:
    """ReLU MLP of the normalized offset, masked to its support."""

    def __init__(self, c_in: int, c_out: int, pitch, support: Support, hidden=(16,), seed: int = 0,
                 weights=None):
        self.c_in, self.c_out = c_in, c_out
        self.pitch = (pitch, pitch) if np.isscalar(pitch) else tuple(float(p) for p in pitch)
        self.support = support
        self.hidden = tuple(hidden)
        dims = [support.d, *self.hidden, c_in * c_out]
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = []
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                bound = np.sqrt(6.0 / a) if i < len(dims) - 2 else np.sqrt(1.0 / (a * c_in))
                weights.append(rng.uniform(-bound, bound, size=(a, b)))
                weights.append(np.zeros(b) if i < len(dims) - 2 else rng.uniform(-bound, bound, size=b))
        self.weights = [w if isinstance(w, Value) else ad.parameter(w) for w in weights]

    @property
    def density_scale(self) -> float:
        return 1.0 / float(np.prod(self.pitch))

    def values(self, offsets: np.ndarray) -> Value:
        off = np.atleast_2d(offsets)
        h = Value(off / np.asarray(self.pitch))
        n_layers = len(self.weights) // 2
        for i in range(n_layers):
            w, b = self.weights[2 * i], self.weights[2 * i + 1]
            h = ad.matmul(h, w) + b
            if i < n_layers - 1:
                h = h.relu()
        inside = self.support.contains(off).astype(h.dtype)[:, None] * self.density_scale
        return (h * Value(inside)).reshape(len(off), self.c_in, self.c_out)

    def params(self) -> list:
        return list(self.weights)


class VoronoiBins:
    """Partition of a kernel support into the Voronoi cells of seed offsets."""

    def __init__(self, seeds: np.ndarray, support: Support):
        self.seeds = np.atleast_2d(np.asarray(seeds, dtype=np.float64))
        self.support = support
        self._tree = cKDTree(self.seeds)
        self.key = hashlib.sha1(self.seeds.tobytes()).hexdigest()

    @classmethod
    def sobol(cls, support: Support, n_bins: int) -> "VoronoiBins":
        dom = Domain(tuple(zip(support.lo, support.hi)))
        return cls(sobol_sequence(support.d, n_bins, None, dom).points, support)

    @property
    def n_bins(self) -> int:
        return len(self.seeds)

    def assign(self, offsets: np.ndarray) -> np.ndarray:
        _, idx = self._tree.query(np.atleast_2d(offsets))
        return np.asarray(idx, dtype=np.int64)


class GaussianKernel:
    """Smooth kernel ``A_io * exp(-|u|^2 / (2 width^2))`` on its support.

    ``u`` is the normalized offset; the amplitudes ``A`` (c_in, c_out) are the
    trainable parameters.
    """

    def __init__(self, c_in: int, c_out: int, pitch, support: Support, width: float = 1.0,
                 amplitude=None, seed: int = 0):
        self.c_in, self.c_out = c_in, c_out
        self.pitch = (pitch, pitch) if np.isscalar(pitch) else tuple(float(p) for p in pitch)
        self.support = support
        self.width = float(width)
        if amplitude is None:
            amplitude = np.random.default_rng(seed).normal(size=(c_in, c_out)) / np.sqrt(c_in)
        self.amplitude = amplitude if isinstance(amplitude, Value) else ad.parameter(amplitude)

    @property
    def density_scale(self) -> float:
        return 1.0 / float(np.prod(self.pitch))

    def profile(self, offsets: np.ndarray) -> np.ndarray:
        off = np.atleast_2d(offsets)
        u = off / np.asarray(self.pitch)
        g = np.exp(-0.5 * np.sum(u * u, axis=1) / self.width ** 2)
        return g * self.support.contains(off) * self.density_scale

    def values(self, offsets: np.ndarray) -> Value:
        prof = Value(self.profile(offsets)[:, None, None])
        return prof * self.amplitude

    def params(self) -> list:
        return [self.amplitude]
