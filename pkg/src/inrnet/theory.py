"""Executable forms of the rectangle-cover approximation and the bump-function study.

The first half builds a ReLU network approximating a piecewise-constant
functional ``J: R^n -> R`` by covering the area under its graph with
rectangles. The second half measures how the gradient of a QMC layer
estimate with respect to one sample value approaches the directional
derivative of the exact layer along a shrinking bump.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import InvalidRegionsError, UnsupportedTargetError
from .layers.conv import conv_forward
from .layers.geometry import _pairs
from .layers.graph import GraphBuilder, NetworkGraph, forward
from .pointset import Domain, PointSet, sobol_sequence

# ----------------------------------------------------------------------------
# piecewise-constant targets
# ----------------------------------------------------------------------------


@dataclass
class PiecewiseConstant:
    """Sum of constant values on disjoint boxes inside ``[-c, c]^n`` (zero elsewhere)."""

    n: int
    c: float
    pieces: list  # [(lo, hi, value)]

    def __post_init__(self):
        clean = []
        for lo, hi, v in self.pieces:
            lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
            if lo.shape != (self.n,) or hi.shape != (self.n,) or np.any(hi <= lo):
                raise InvalidRegionsError(f"bad box {lo} - {hi}")
            if np.any(lo < -self.c - 1e-12) or np.any(hi > self.c + 1e-12):
                raise InvalidRegionsError("pieces must lie inside [-c, c]^n")
            clean.append((lo, hi, float(v)))
        for i in range(len(clean)):
            for j in range(i + 1, len(clean)):
                a, b = clean[i], clean[j]
                if np.all(np.minimum(a[1], b[1]) - np.maximum(a[0], b[0]) > 1e-12):
                    raise InvalidRegionsError(f"pieces {i} and {j} overlap")
        self.pieces = clean

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.zeros(len(x))
        for lo, hi, v in self.pieces:
            out += v * np.all((x >= lo) & (x < hi), axis=1)
        return out

    def l1_norm(self) -> float:
        """Lebesgue L1 norm."""
        return float(sum(abs(v) * np.prod(hi - lo) for lo, hi, v in self.pieces))

    def part_norm(self, sign: int) -> float:
        return float(sum(abs(v) * np.prod(hi - lo) for lo, hi, v in self.pieces if np.sign(v) == sign))


def quadrant_target(n: int = 2, c: float = 1.0) -> PiecewiseConstant:
    """Indicator of the positive orthant ``[0, c]^n``."""
    return PiecewiseConstant(n, c, [(np.zeros(n), np.full(n, c), 1.0)])


def box_indicator(lo, hi, c: float = 1.0, value: float = 1.0) -> PiecewiseConstant:
    lo = np.asarray(lo, dtype=np.float64)
    return PiecewiseConstant(len(lo), c, [(lo, np.asarray(hi, dtype=np.float64), value)])


def halves_target(n: int = 2, c: float = 1.0) -> PiecewiseConstant:
    """+1 where ``x_1 < 0``, -1 where ``x_1 >= 0``."""
    lo, hi = np.full(n, -c), np.full(n, c)
    left_hi, right_lo = hi.copy(), lo.copy()
    left_hi[0], right_lo[0] = 0.0, 0.0
    return PiecewiseConstant(n, c, [(lo, left_hi, 1.0), (right_lo, hi, -1.0)])


TARGETS = {"quadrant": quadrant_target, "halves": halves_target}


# ----------------------------------------------------------------------------
# rectangle cover and ramp network
# ----------------------------------------------------------------------------


@dataclass
class Rectangle:
    lo: np.ndarray
    hi: np.ndarray
    height: float

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


@dataclass
class RectangleCover:
    n: int
    positive: list
    negative: list
    delta_pos: float
    delta_neg: float
    eps: float = 0.0

    def __post_init__(self):
        for r in self.positive + self.negative:
            if not r.height > 0:
                raise ValueError("rectangle heights must be positive")
        for dlt in (self.delta_pos, self.delta_neg):
            if not 0 < dlt < 0.5:
                raise ValueError(f"ramp fraction must lie in (0, 0.5), got {dlt}")

    def covered_mass(self) -> float:
        """``sum y_i vol(X_i)`` over both signs."""
        return float(sum(r.height * r.volume for r in self.positive + self.negative))


def ramp_fraction(eps: float, part_norm: float, n: int) -> float:
    """``1/2 (1 - (1 - (eps/8) / (||J_sign||_1 + eps/16))^(1/n))``, kept below 1/2."""
    ratio = (eps / 8.0) / (part_norm + eps / 16.0)
    if ratio >= 1.0:
        return 0.49
    return min(0.5 * (1.0 - (1.0 - ratio) ** (1.0 / n)), 0.49)


def build_rectangle_cover(target, eps: float) -> RectangleCover:
    """Exact rectangle cover of a piecewise-constant target with ramp fractions for ``eps``."""
    if not isinstance(target, PiecewiseConstant):
        raise UnsupportedTargetError("only piecewise-constant targets on boxes are supported")
    if eps <= 0:
        raise ValueError("eps must be positive")
    pos = [Rectangle(lo, hi, v) for lo, hi, v in target.pieces if v > 0]
    neg = [Rectangle(lo, hi, -v) for lo, hi, v in target.pieces if v < 0]
    return RectangleCover(
        target.n, pos, neg,
        ramp_fraction(eps, target.part_norm(1), target.n),
        ramp_fraction(eps, target.part_norm(-1), target.n),
        eps,
    )


def build_ramp_network(cover) -> NetworkGraph:
    """Vector graph computing ``sum y+ T+ - sum y- T-`` (one output per cover).

    Each factor of ``T`` is written as ``relu(1 - relu(f - b')/w) - relu(1 - relu(f - a)/w)``
    with ramp width ``w = delta * (b - a)``, the positively homogeneous form
    of ``(1/w)[relu(w - relu(f - b')) - relu(w - relu(f - a))]``; it equals
    one exactly inside the inner box.
    """
    with ad.precision(np.float64):
        return _ramp_graph(list(cover) if isinstance(cover, (list, tuple)) else [cover])


def _ramp_graph(covers: list) -> NetworkGraph:
    n = covers[0].n
    blocks = []  # (rect, delta, signed height, cover index)
    for ci, cv in enumerate(covers):
        blocks += [(r, cv.delta_pos, r.height, ci) for r in cv.positive]
        blocks += [(r, cv.delta_neg, -r.height, ci) for r in cv.negative]
    b = GraphBuilder("vector->vector", n)
    n_out = len(covers)
    if not blocks:
        b.dense(n_out, W=np.zeros((n, n_out)), b=np.zeros(n_out))
        return b.build()
    m = len(blocks) * n
    bp = np.concatenate([blk[0].hi - blk[1] * (blk[0].hi - blk[0].lo) for blk in blocks])
    a = np.concatenate([blk[0].lo for blk in blocks])
    w = np.concatenate([blk[1] * (blk[0].hi - blk[0].lo) for blk in blocks])
    tile = np.tile(np.eye(n), (1, len(blocks)))  # input i -> every block's slot i
    # layer 1: [f - b', f - a]
    b.dense(2 * m, W=np.concatenate([tile, tile], axis=1), b=np.concatenate([-bp, -a]))
    b.relu()
    # layer 2: 1 - relu(.)/w
    inv = np.concatenate([1.0 / w, 1.0 / w])
    b.dense(2 * m, W=np.diag(-inv), b=np.ones(2 * m))
    b.relu()
    # layer 3: difference of the two ramps
    b.dense(m, W=np.concatenate([np.eye(m), -np.eye(m)], axis=0), b=np.zeros(m))
    b.group_prod(n)
    heights = np.zeros((len(blocks), n_out))
    for k, (_, _, y, ci) in enumerate(blocks):
        heights[k, ci] = y
    b.dense(n_out, W=heights, b=np.zeros(n_out))
    return b.build()


def evaluate_network(graph: NetworkGraph, x: np.ndarray) -> np.ndarray:
    """Run a vector graph on (M, n) inputs at double precision; (M, outputs)."""
    with ad.precision(np.float64), ad.no_grad():
        out = forward(graph, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return out.data


@dataclass
class L1Estimate:
    error: float
    stderr: float
    n_samples: int


def l1_approximation_error(network, target: PiecewiseConstant, sampler: Optional[Callable] = None,
                           n_samples: int = 100_000, seed: int = 0, batch: int = 20_000) -> L1Estimate:
    """Monte Carlo estimate of ``int |J - K|`` (Lebesgue measure on ``[-c, c]^n``).

    ``sampler(rng, m)`` may supply another test measure; the estimate is then
    the mean absolute error times the cube volume.
    """
    rng = np.random.default_rng(seed)
    vol = (2 * target.c) ** target.n
    errs = []
    done = 0
    while done < n_samples:
        m = min(batch, n_samples - done)
        x = sampler(rng, m) if sampler is not None else rng.uniform(-target.c, target.c, (m, target.n))
        if isinstance(network, NetworkGraph):
            k = evaluate_network(network, x)[:, 0]
        elif network is None:
            k = np.zeros(m)
        else:
            k = np.asarray(network(x)).reshape(m)
        errs.append(np.abs(target(x) - k))
        done += m
    e = np.concatenate(errs)
    return L1Estimate(float(vol * e.mean()), float(vol * e.std(ddof=1) / math.sqrt(len(e))) if len(e) > 1
                      else 0.0, len(e))


def approx_demo(target: str = "quadrant", eps: float = 0.1, n: int = 2, c: float = 1.0,
                n_samples: int = 100_000, seed: int = 0):
    """Cover, network and measured L1 error for a named target."""
    if target not in TARGETS:
        raise UnsupportedTargetError(f"unknown target {target!r}; choose from {sorted(TARGETS)}")
    J = TARGETS[target](n, c)
    cover = build_rectangle_cover(J, eps)
    net = build_ramp_network(cover)
    return cover, net, l1_approximation_error(net, J, n_samples=n_samples, seed=seed)


# ----------------------------------------------------------------------------
# bump functions and the gradient-convergence study
# ----------------------------------------------------------------------------


def smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass
class BumpFamily:
    """``psi(x) = smoothstep(1 - |x - centre| / r)``; 1 at the centre, 0 beyond ``r``."""

    centre: np.ndarray
    radius: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        rho = np.linalg.norm(np.atleast_2d(x) - self.centre, axis=1)
        return smoothstep(1.0 - rho / self.radius)

    @classmethod
    def for_points(cls, centre: np.ndarray, points: np.ndarray) -> "BumpFamily":
        """Radius = half the distance from ``centre`` to the nearest other sample."""
        d = np.linalg.norm(points - centre, axis=1)
        d = d[d > 0]
        return cls(np.asarray(centre, dtype=np.float64), 0.5 * float(d.min()))

    def quadrature(self, order: int = 24):
        """Gauss-Legendre nodes and weights on the bump's bounding box (2D)."""
        t, w = np.polynomial.legendre.leggauss(order)
        x = self.centre[0] + self.radius * t
        y = self.centre[1] + self.radius * t
        xx, yy = np.meshgrid(x, y, indexing="xy")
        ww = np.outer(w, w) * self.radius ** 2
        return np.stack([xx.ravel(), yy.ravel()], axis=1), ww.ravel()


@dataclass
class StudyLayer:
    """Single-channel layer under study: ``sigma(conv_K f)`` or ``W f``."""

    kind: str  # "conv" or "linear"
    kernel: object = None
    weight: float = 1.0
    activation: Optional[str] = None

    def apply(self, values: Value, ps: PointSet) -> Value:
        if self.kind == "linear":
            out = values * self.weight
        else:
            out, _ = conv_forward(values, ps, self.kernel)
        return out.relu() if self.activation == "relu" else out

    def kernel_density(self, offsets: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.kernel.values(offsets).data[:, 0, 0].astype(np.float64)


def _as_function(inr) -> Callable:
    if callable(inr) and not hasattr(inr, "weights"):
        return lambda p: np.asarray(inr(p), dtype=np.float64).reshape(len(p), -1)[:, 0]
    from .inr import evaluate_many

    return lambda p: evaluate_many([inr], PointSet(Domain.cube(2), p))[0][:, 0].astype(np.float64)


def _study_points(n: int, seed: int, centre: np.ndarray, domain: Domain):
    ps = sobol_sequence(2, n, seed, domain)
    hit = np.flatnonzero(np.all(np.isclose(ps.points, centre, atol=1e-12), axis=1))
    if len(hit):
        return ps, int(hit[0])
    pts = np.vstack([ps.points, centre[None]])
    return PointSet(domain, pts, "custom", seed), n


def empirical_gradient(layer: StudyLayer, f: Callable, ps: PointSet, idx: int) -> float:
    """``N * d/d f(x_idx)`` of the QMC mean of the layer output."""
    with ad.precision(np.float64):
        v = ad.parameter(f(ps.points)[:, None])
        s = layer.apply(v, ps).mean()
        s.backward()
    return float(v.grad[idx, 0] * ps.n)


class _Reference:
    """Fine-resolution exact-layer evaluation near a bump."""

    def __init__(self, layer: StudyLayer, f: Callable, domain: Domain, n_ref: int = 2 ** 15, seed: int = 7):
        self.layer, self.f, self.domain = layer, f, domain
        self.ps = sobol_sequence(2, n_ref, seed, domain)
        self.fvals = f(self.ps.points)
        self._base = np.full(self.ps.n, np.nan)

    def base(self, idx: np.ndarray) -> np.ndarray:
        """Unperturbed layer pre-activations at reference samples ``idx`` (memoised)."""
        todo = idx[np.isnan(self._base[idx])]
        if len(todo):
            dst, src, off = _pairs(self.ps.points, self.ps.tree(), self.ps.points[todo],
                                   self.layer.kernel.support)
            self._base[todo] = (self.domain.volume / self.ps.n) * np.bincount(
                dst, self.layer.kernel_density(off) * self.fvals[src], minlength=len(todo))
        return self._base[idx]

    def directional(self, bump: BumpFamily, tau: float) -> float:
        """``(vol / int psi) * (S[f + tau psi] - S[f - tau psi]) / (2 tau)``."""
        nodes, wts = bump.quadrature()
        psi = bump(nodes)
        mass = float(np.sum(wts * psi))
        vol = self.domain.volume
        if self.layer.kind == "linear":
            # S[f + tau psi] - S[f - tau psi] = 2 tau W int(psi) / vol
            diff = 2 * tau * self.layer.weight * mass / vol
            return (vol / mass) * diff / (2 * tau)
        ker = self.layer.kernel
        sup_lo, sup_hi = np.asarray(ker.support.lo), np.asarray(ker.support.hi)
        # only outputs whose window can see the bump change
        near = np.all((self.ps.points > bump.centre - bump.radius - sup_hi)
                      & (self.ps.points < bump.centre + bump.radius - sup_lo), axis=1)
        xo = self.ps.points[near]
        base = self.base(np.flatnonzero(near))
        rel = (nodes[None, :, :] - xo[:, None, :]).reshape(-1, 2)
        pert = (self.layer.kernel_density(rel).reshape(len(xo), -1) * (wts * psi)).sum(axis=1)
        act = (lambda z: np.maximum(z, 0)) if self.layer.activation == "relu" else (lambda z: z)
        diff = np.sum(act(base + tau * pert) - act(base - tau * pert)) / self.ps.n
        return (vol / mass) * diff / (2 * tau)


def gradient_convergence_study(layer: StudyLayer, inr, schedule: Sequence[int] = (256, 1024, 4096),
                               centre=(0.1, -0.2), seed: int = 0, tau: float = 1e-3,
                               domain: Optional[Domain] = None, n_ref: int = 2 ** 15,
                               reference: Optional[_Reference] = None) -> list:
    """Rows ``(n, empirical_grad, directional_fd, gap)`` over the N schedule.

    ``empirical_grad`` is N times the derivative of the QMC estimate with
    respect to the tracked sample value; ``directional_fd`` is the central
    difference of the exact layer along ``tau * psi`` divided by the bump's
    share of the domain (``int psi / vol``). Both tend to the same gradient
    density as N grows; for a pointwise linear layer both equal its weight.
    """
    domain = domain or Domain.cube(2)
    centre = np.asarray(centre, dtype=np.float64)
    f = _as_function(inr)
    ref = reference or _Reference(layer, f, domain, n_ref)
    rows = []
    for n in schedule:
        ps, idx = _study_points(n, seed, centre, domain)
        emp = empirical_gradient(layer, f, ps, idx)
        bump = BumpFamily.for_points(centre, ps.points)
        fd = ref.directional(bump, tau)
        rows.append((int(n), float(emp), float(fd), float(abs(emp - fd))))
    return rows


def parameter_gradients(kernel, inr, schedule: Sequence[int] = (256, 1024, 4096), seed: int = 0,
                        domain: Optional[Domain] = None) -> list:
    """Gradient of ``qmc_mean(conv(f))`` with respect to the kernel parameters at each N."""
    domain = domain or Domain.cube(2)
    f = _as_function(inr)
    out = []
    for n in schedule:
        ps = sobol_sequence(2, n, seed, domain)
        for p in kernel.params():
            p.grad = None
        with ad.precision(np.float64):
            v = Value(f(ps.points)[:, None])
            conv_forward(v, ps, kernel)[0].mean().backward()
        out.append(np.concatenate([np.asarray(p.grad, dtype=np.float64).ravel() for p in kernel.params()]))
    return out


def study_csv(rows) -> str:
    lines = ["n,empirical_grad,directional_fd,gap"]
    lines += [f"{n},{e!r},{d!r},{g!r}" for n, e, d, g in rows]
    return "\n".join(lines) + "\n"
