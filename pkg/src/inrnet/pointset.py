"""Point sequences on box domains, discrepancy, and QMC sample means.

Every integral in the engine is estimated against a :class:`PointSet`.
Low-discrepancy generators (Sobol, Halton) keep their prefix property, so
truncating a set is the multi-scale downsampling primitive and extending it
is the upsampling primitive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    CannotExtendError,
    DomainMismatchError,
    EmptyInputError,
    InsufficientPointsError,
    UnsupportedDimensionError,
)

GENERATORS = ("sobol", "halton", "grid", "iid", "shrunk", "custom")
MAX_DIM = 8
_BITS = 32

# Joe & Kuo direction numbers (new-joe-kuo-6.21201), dimensions 2..8.
# Each row: (degree s, coefficient a, initial m_1..m_s).
_JOE_KUO = (
    (1, 0, (1,)),
    (2, 1, (1, 3)),
    (3, 1, (1, 3, 1)),
    (3, 2, (1, 1, 1)),
    (4, 1, (1, 1, 3, 3)),
    (4, 4, (1, 3, 5, 13)),
    (5, 2, (1, 1, 5, 5, 17)),
)

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19)


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box ``[lo_1, hi_1] x ... x [lo_d, hi_d]``."""

    bounds: tuple

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if not b:
            raise ValueError("domain needs at least one dimension")
        for lo, hi in b:
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"invalid interval [{lo}, {hi}]")
        object.__setattr__(self, "bounds", b)

    @classmethod
    def cube(cls, d: int, lo: float = -1.0, hi: float = 1.0) -> "Domain":
        return cls(tuple((lo, hi) for _ in range(d)))

    @property
    def d(self) -> int:
        return len(self.bounds)

    @property
    def lo(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def hi(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        return self.lo + np.asarray(u, dtype=np.float64) * self.extent

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.lo) / self.extent

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def is_cube(self, lo: float, hi: float) -> bool:
        return all(b == (lo, hi) for b in self.bounds)


@dataclass(frozen=True, eq=False)
class PointSet:
    """Ordered sample coordinates on a domain.

    ``grid_shape``/``pitch`` are only set for lattice sets, whose samples
    stand for cells of volume ``prod(pitch)`` instead of ``volume / n``.
    """

    domain: Domain
    points: np.ndarray
    generator: str = "custom"
    seed: Optional[int] = None
    grid_shape: Optional[tuple] = None
    pitch: Optional[tuple] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[1] != self.domain.d:
            raise ValueError(f"points shape {pts.shape} does not match d={self.domain.d}")
        if pts.shape[0] < 1:
            raise EmptyInputError("a point set needs at least one point")
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator tag {self.generator!r}")
        if not np.all(self.domain.contains(pts, tol=1e-9)):
            raise DomainMismatchError("points lie outside the domain")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def cell_volume(self) -> float:
        """Integration weight carried by each sample under Lebesgue measure."""
        if self.pitch is not None:
            return float(np.prod(self.pitch))
        return self.domain.volume / self.n

    def tree(self) -> cKDTree:
        if "tree" not in self._cache:
            self._cache["tree"] = cKDTree(self.points)
        return self._cache["tree"]

    def same_points(self, other: "PointSet") -> bool:
        return (
            self is other
            or (self.points.shape == other.points.shape and np.array_equal(self.points, other.points))
        )

    def with_points(self, points, generator="custom", **kw) -> "PointSet":
        return PointSet(self.domain, points, generator=generator, seed=self.seed, **kw)

    def dump(self) -> str:
        """Debug text: header line, then one point per line."""
        seed = "none" if self.seed is None else str(self.seed)
        lines = [f"# pointset d={self.d} n={self.n} gen={self.generator} seed={seed}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.points]
        return "\n".join(lines) + "\n"


def _check_dim(d: int):
    if d < 1:
        raise ValueError("dimension must be positive")
    if d > MAX_DIM:
        raise UnsupportedDimensionError(f"d={d} exceeds the supported maximum {MAX_DIM}")


def _direction_numbers(d: int) -> np.ndarray:
    """(d, 32) uint64 array of direction integers scaled to 32 bits."""
    v = np.zeros((d, _BITS), dtype=np.uint64)
    v[0] = [1 << (_BITS - 1 - k) for k in range(_BITS)]
    for j in range(1, d):
        s, a, m_init = _JOE_KUO[j - 1]
        m = list(m_init)
        for k in range(s, _BITS):
            new = m[k - s] ^ (m[k - s] << s)
            for i in range(1, s):
                if (a >> (s - 1 - i)) & 1:
                    new ^= m[k - i] << i
            m.append(new)
        v[j] = [m[k] << (_BITS - 1 - k) for k in range(_BITS)]
    return v


def _sobol_ints(d: int, n: int, start: int = 0) -> np.ndarray:
    idx = np.arange(start, start + n, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    v = _direction_numbers(d)
    out = np.zeros((n, d), dtype=np.uint64)
    for k in range(_BITS):
        bit = ((gray >> np.uint64(k)) & np.uint64(1)).astype(bool)
        if bit.any():
            out[bit] ^= v[:, k]
    return out


def _xor_shift(d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2**_BITS, size=d, dtype=np.uint64)


def sobol_sequence(d: int, n: int, scramble_seed: Optional[int] = None,
                   domain: Optional[Domain] = None) -> PointSet:
    """First ``n`` Sobol points (Gray-code order), optionally digitally shifted.

    The scramble is a per-dimension XOR with a seeded random 32-bit word, which
    keeps the net structure and the prefix property.
    """
    _check_dim(d)
    if n < 1:
        raise ValueError("n must be >= 1")
    domain = domain or Domain.cube(d, 0.0, 1.0)
    if domain.d != d:
        raise DomainMismatchError("domain dimension differs from d")
    ints = _sobol_ints(d, n)
    if scramble_seed is not None:
        ints ^= _xor_shift(d, scramble_seed)
    u = ints.astype(np.float64) / float(2**_BITS)
    return PointSet(domain, domain.from_unit(u), "sobol", scramble_seed)


def radical_inverse(j: np.ndarray, base: int) -> np.ndarray:
    j = np.asarray(j, dtype=np.int64).copy()
    out = np.zeros(j.shape, dtype=np.float64)
    f = 1.0 / base
    while np.any(j > 0):
        out += f * (j % base)
        j //= base
        f /= base
    return out


def halton_sequence(d: int, n: int, domain: Optional[Domain] = None) -> PointSet:
    """Terms 1..n of the Halton sequence (radical inverses in the first d primes)."""
    _check_dim(d)
    if n < 1:
        raise ValueError("n must be >= 1")
    domain = domain or Domain.cube(d, 0.0, 1.0)
    j = np.arange(1, n + 1)
    u = np.stack([radical_inverse(j, _PRIMES[i]) for i in range(d)], axis=1)
    return PointSet(domain, domain.from_unit(u), "halton")


def grid_points(resolutions: Sequence[int], domain: Optional[Domain] = None) -> PointSet:
    """Pixel-centred lattice; the first coordinate varies fastest."""
    res = [int(r) for r in resolutions]
    if any(r < 1 for r in res):
        raise ValueError("resolutions must be >= 1")
    domain = domain or Domain.cube(len(res), 0.0, 1.0)
    if domain.d != len(res):
        raise DomainMismatchError("one resolution per domain dimension is required")
    axes = [(np.arange(r) + 0.5) / r for r in res]
    mesh = np.meshgrid(*axes, indexing="ij")
    u = np.stack([m.ravel(order="F") for m in mesh], axis=1)
    pitch = tuple(float(e) / r for e, r in zip(domain.extent, res))
    return PointSet(domain, domain.from_unit(u), "grid", grid_shape=tuple(res), pitch=pitch)


def iid_points(d: int, n: int, seed: int, domain: Optional[Domain] = None) -> PointSet:
    domain = domain or Domain.cube(d, 0.0, 1.0)
    rng = np.random.default_rng(seed)
    return PointSet(domain, domain.from_unit(rng.random((n, d))), "iid", seed)


def shrink_transform(ps: PointSet) -> PointSet:
    """Pull points towards the centre: ``x -> x**2 * sign(x)`` on [-1, 1]^d."""
    if not ps.domain.is_cube(-1.0, 1.0):
        raise DomainMismatchError("shrink_transform needs the [-1, 1]^d domain")
    x = ps.points
    return PointSet(ps.domain, x * x * np.sign(x), "shrunk", ps.seed)


def make_points(sampler: str, d: int, n: int, domain: Domain, seed: Optional[int] = None) -> PointSet:
    """Dispatch by sampler name (``sobol``/``qmc``, ``halton``, ``grid``, ``shrunk``, ``iid``)."""
    if sampler in ("sobol", "qmc"):
        return sobol_sequence(d, n, seed, domain)
    if sampler == "halton":
        return halton_sequence(d, n, domain)
    if sampler == "shrunk":
        return shrink_transform(sobol_sequence(d, n, seed, domain))
    if sampler == "iid":
        return iid_points(d, n, 0 if seed is None else seed, domain)
    if sampler == "grid":
        side = round(n ** (1.0 / d))
        return grid_points([side] * d, domain)
    raise ValueError(f"unknown sampler {sampler!r}")


def regenerate(ps: PointSet, n: int) -> PointSet:
    """Same generator, seed and domain, ``n`` terms."""
    if ps.generator == "sobol":
        return sobol_sequence(ps.d, n, ps.seed, ps.domain)
    if ps.generator == "halton":
        return halton_sequence(ps.d, n, ps.domain)
    raise CannotExtendError(f"generator {ps.generator!r} has no sequence continuation")


def truncate(ps: PointSet, m: int) -> PointSet:
    """First ``m`` points; prefix of a low-discrepancy sequence is low-discrepancy."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > ps.n:
        raise InsufficientPointsError(f"cannot keep {m} of {ps.n} points")
    if m == ps.n:
        return ps
    return replace(ps, points=ps.points[:m], grid_shape=None, pitch=None, _cache={})


def extend(ps: PointSet, m: int):
    """Continue the sequence to ``m`` terms; return it with a nearest-neighbour map.

    ``nn_map[k]`` is the index among the original points closest to new point
    ``k`` (lowest index on ties).
    """
    if ps.generator not in ("sobol", "halton"):
        raise CannotExtendError(f"cannot extend a {ps.generator!r} point set")
    if m < ps.n:
        raise ValueError("extend needs m >= n")
    big = regenerate(ps, m)
    if not np.array_equal(big.points[: ps.n], ps.points):
        raise CannotExtendError("point set is not a prefix of its generator sequence")
    nn_map = nearest_index(ps, big.points)
    nn_map[: ps.n] = np.arange(ps.n)
    return big, nn_map


def nearest_index(ps: PointSet, queries: np.ndarray) -> np.ndarray:
    """Index of the nearest sample for each query; ties go to the lowest index."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    k = min(ps.n, 4)
    dist, idx = ps.tree().query(queries, k=k)
    if k == 1:
        return np.asarray(idx, dtype=np.int64)
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx)
    best = dist[:, :1]
    tie = np.isclose(dist, best, rtol=0, atol=1e-15)
    masked = np.where(tie, idx, np.iinfo(np.int64).max)
    return masked.min(axis=1).astype(np.int64)


# ----------------------------------------------------------------------------
# discrepancy
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscrepancyReport:
    n: int
    star_discrepancy: float
    method: str


def _star_1d(u: np.ndarray) -> float:
    x = np.sort(u)
    n = len(x)
    i = np.arange(1, n + 1)
    return float(np.max(np.maximum(i / n - x, x - (i - 1) / n)))


def _star_2d_exact(u: np.ndarray) -> float:
    n = len(u)
    xs = np.unique(np.append(u[:, 0], 1.0))
    ys = np.unique(np.append(u[:, 1], 1.0))
    ix = np.searchsorted(xs, u[:, 0])
    iy = np.searchsorted(ys, u[:, 1])
    hist = np.zeros((len(xs), len(ys)), dtype=np.int64)
    np.add.at(hist, (ix, iy), 1)
    closed = hist.cumsum(0).cumsum(1)
    # open box [0,a) x [0,b) counts points strictly below both coordinates
    opened = np.zeros_like(closed)
    opened[1:, 1:] = closed[:-1, :-1]
    vol = xs[:, None] * ys[None, :]
    return float(max(np.max(closed / n - vol), np.max(vol - opened / n), 0.0))


def _box_counts(u: np.ndarray, corners: np.ndarray, chunk: int = 2048):
    closed = np.empty(len(corners))
    opened = np.empty(len(corners))
    for s in range(0, len(corners), chunk):
        c = corners[s : s + chunk]
        closed[s : s + chunk] = np.all(u[None, :, :] <= c[:, None, :], axis=2).sum(1)
        opened[s : s + chunk] = np.all(u[None, :, :] < c[:, None, :], axis=2).sum(1)
    return closed, opened


def star_discrepancy(ps: PointSet, exact_max_n: int = 512, n_boxes: int = 100_000,
                     subsample: int = 64, seed: int = 0) -> DiscrepancyReport:
    """Star discrepancy on the domain rescaled to the unit cube.

    Exact for d=1 and for d=2 with n <= ``exact_max_n``; otherwise a lower
    bound from seeded random anchored boxes plus the corner grid of a
    subsample.
    """
    u = np.clip(ps.domain.to_unit(ps.points), 0.0, 1.0)
    n, d = u.shape
    if d == 1:
        return DiscrepancyReport(n, _star_1d(u[:, 0]), "exact")
    if d == 2 and n <= exact_max_n:
        return DiscrepancyReport(n, _star_2d_exact(u), "exact")
    rng = np.random.default_rng(seed)
    corners = rng.random((n_boxes, d))
    sub = u[rng.choice(n, size=min(n, subsample), replace=False)]
    axes = [np.append(sub[:, k], 1.0) for k in range(d)]
    budget = max(1, int(round(n_boxes ** (1.0 / d))))
    axes = [a if len(a) <= budget else rng.choice(a, budget, replace=False) for a in axes]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    corners = np.vstack([corners, grid])
    closed, opened = _box_counts(u, corners)
    vol = np.prod(corners, axis=1)
    est = max(np.max(closed / n - vol), np.max(vol - opened / n), 0.0)
    return DiscrepancyReport(n, float(min(est, 1.0)), "sampled")


def qmc_mean(values, ps: Optional[PointSet] = None):
    """Per-channel sample mean over the point axis (axis -2 for arrays/Values).

    Accepts a numpy array of shape (N, c) / (B, N, c) or an autodiff Value,
    in which case the result stays on the tape.
    """
    from .autodiff import Value

    if isinstance(values, Value):
        if values.size == 0:
            raise EmptyInputError("qmc_mean of empty values")
        if ps is not None and values.shape[-2] != ps.n:
            raise ValueError(f"values have {values.shape[-2]} rows, point set has {ps.n}")
        return values.mean(axis=-2)
    arr = np.asarray(values)
    if arr.size == 0:
        raise EmptyInputError("qmc_mean of empty values")
    if arr.ndim == 1:
        arr = arr[:, None]
    if ps is not None and arr.shape[-2] != ps.n:
        raise ValueError(f"values have {arr.shape[-2]} rows, point set has {ps.n}")
    return arr.mean(axis=-2)
