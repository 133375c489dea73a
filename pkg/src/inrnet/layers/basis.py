"""Legendre bases, inner products and region tokenization."""

from __future__ import annotations

from itertools import product
from typing import Sequence

import numpy as np
from numpy.polynomial import legendre as npleg

from .. import autodiff as ad
from ..autodiff import Value
from ..errors import InvalidRegionsError, ShapeError
from ..pointset import Domain, PointSet, qmc_mean
from .conv import _check_rows, batched

MAX_DEGREE = 8


def legendre_1d(t: np.ndarray, n: int) -> np.ndarray:
    """Orthonormal Legendre polynomial of degree n on [-1, 1] (normalized measure)."""
    coef = np.zeros(n + 1)
    coef[n] = 1.0
    return np.sqrt(2 * n + 1) * npleg.legval(t, coef)


class LegendreBasis:
    """Products of rescaled 1D Legendre polynomials on a box.

    Multi-indices have total degree ``<= max_degree`` and are ordered by total
    degree, so the first function is the constant 1.
    """

    def __init__(self, domain: Domain, max_degree: int):
        if not 0 <= max_degree <= MAX_DEGREE:
            raise ValueError(f"max_degree must be in [0, {MAX_DEGREE}]")
        self.domain = domain
        self.max_degree = max_degree
        idx = [m for m in product(range(max_degree + 1), repeat=domain.d) if sum(m) <= max_degree]
        self.indices = sorted(idx, key=lambda m: (sum(m), tuple(-v for v in m)))

    def __len__(self) -> int:
        return len(self.indices)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """(N, n_functions) values."""
        t = 2.0 * self.domain.to_unit(np.atleast_2d(points)) - 1.0
        cols = []
        for m in self.indices:
            v = np.ones(len(t))
            for axis, deg in enumerate(m):
                if deg:
                    v = v * legendre_1d(t[:, axis], deg)
            cols.append(v)
        return np.stack(cols, axis=1)


def legendre_basis(domain: Domain, max_degree: int) -> LegendreBasis:
    return LegendreBasis(domain, max_degree)


def inner_product(f_values, g_values, ps: PointSet):
    """QMC estimate of the normalized inner product, per channel."""
    if isinstance(f_values, Value) or isinstance(g_values, Value):
        return qmc_mean(ad.as_value(f_values) * ad.as_value(g_values), ps)
    return qmc_mean(np.asarray(f_values) * np.asarray(g_values), ps)


def legendre_project(values, ps: PointSet, basis: LegendreBasis) -> Value:
    """Coefficients ``<f_c, P_k>``: (B, N, c) -> (B, n_functions * c), index ``k * c + ch``."""
    f, _ = batched(values)
    _check_rows(f, ps)
    phi = Value(basis(ps.points).T.astype(f.dtype) / ps.n)  # (K, N)
    coef = ad.matmul(phi, f)  # (B, K, c)
    return coef.reshape(f.shape[0], len(basis) * f.shape[2])


def legendre_expand(coefs, ps: PointSet, basis: LegendreBasis, channels: int) -> Value:
    """Function with the given basis coefficients, sampled on ``ps``: (B, K*c) -> (B, N, c)."""
    c = ad.as_value(coefs)
    if c.ndim == 1:
        c = c.reshape(1, c.shape[0])
    if c.shape[1] != len(basis) * channels:
        raise ShapeError(f"expected {len(basis) * channels} coefficients, got {c.shape[1]}")
    phi = Value(basis(ps.points).astype(c.dtype))  # (N, K)
    return ad.matmul(phi, c.reshape(c.shape[0], len(basis), channels))


# ----------------------------------------------------------------------------
# tokenization
# ----------------------------------------------------------------------------


def grid_regions(domain: Domain, splits: Sequence[int]) -> list:
    """Equal boxes splitting each axis into ``splits[i]`` parts (first axis fastest)."""
    edges = [np.linspace(lo, hi, s + 1) for (lo, hi), s in zip(domain.bounds, splits)]
    regions = []
    for idx in product(*[range(s) for s in reversed(splits)]):
        idx = idx[::-1]
        regions.append(Domain(tuple((float(e[i]), float(e[i + 1])) for e, i in zip(edges, idx))))
    return regions


def assign_regions(ps: PointSet, regions: Sequence[Domain]) -> np.ndarray:
    """Region index of each sample; half-open boxes, closed at the domain's upper faces."""
    hi_dom = ps.domain.hi
    member = []
    for r in regions:
        lo, hi = r.lo, r.hi
        upper = (ps.points < hi) | ((ps.points <= hi) & np.isclose(hi, hi_dom))
        member.append(np.all((ps.points >= lo) & upper, axis=1))
    member = np.stack(member, axis=1)
    hits = member.sum(axis=1)
    if np.any(hits != 1):
        bad = int(np.flatnonzero(hits != 1)[0])
        kind = "gap" if hits[bad] == 0 else "overlap"
        raise InvalidRegionsError(f"sample {bad} lies in a region {kind}")
    vols = np.array([r.volume for r in regions])
    if not np.allclose(vols, vols[0], rtol=1e-9):
        raise InvalidRegionsError("regions must have equal volume")
    if not np.isclose(vols.sum(), ps.domain.volume, rtol=1e-9):
        raise InvalidRegionsError("regions do not cover the domain")
    return np.argmax(member, axis=1)


def tokenize(values, ps: PointSet, regions: Sequence[Domain]):
    """Split samples by region: list of ``(values_j (B, n_j, c), sample_index_j)``."""
    f, _ = batched(values)
    _check_rows(f, ps)
    owner = assign_regions(ps, regions)
    out = []
    for j in range(len(regions)):
        idx = np.flatnonzero(owner == j)
        out.append((f.take(idx, axis=1), idx))
    return out


def embed(tokens, ps: PointSet, regions: Sequence[Domain], max_degree: int = 0) -> Value:
    """Per-region Legendre coefficients: (B, R, n_functions * c)."""
    rows = []
    for (tv, idx), region in zip(tokens, regions):
        basis = LegendreBasis(region, max_degree)
        sub = PointSet(region, ps.points[idx]) if len(idx) else None
        if sub is None:
            rows.append(Value(np.zeros((tv.shape[0], len(basis) * tv.shape[2]), dtype=tv.dtype)))
            continue
        rows.append(legendre_project(tv, sub, basis))
    return ad.stack(rows, axis=1)
