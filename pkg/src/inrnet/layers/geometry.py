"""Neighbourhoods, strides and padding regions on point sets.

All derived point sets and neighbour lists are cached on the source
:class:`PointSet` (which is immutable), so repeated forward passes over the
same samples reuse them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..errors import InsufficientPointsError, UnsupportedError
from ..pointset import Domain, PointSet, extend, nearest_index, truncate
from .kernels import Support

PADDINGS = ("zero", "reflect", "none")

# counters for starved outputs (no samples inside the kernel support)
STATS = {"starved": 0}


def _lattice_index(ps: PointSet) -> np.ndarray:
    """(N, d) integer lattice coordinates of a grid point set (first axis fastest)."""
    return np.stack(np.unravel_index(np.arange(ps.n), ps.grid_shape, order="F"), axis=1)


def stride_points(ps: PointSet, level: int) -> PointSet:
    """Coarser point set for stride level ``level``.

    Low-discrepancy and scattered sets keep their first ``ceil(N / 2**(d*level))``
    points. Lattices keep every ``2**level``-th sample along each axis so the
    result is again a lattice (this is what strided discrete layers sample).
    """
    if level <= 0:
        return ps
    key = ("stride", level)
    if key in ps._cache:
        return ps._cache[key]
    step = 2 ** level
    if ps.grid_shape is not None:
        idx = _lattice_index(ps)
        keep = np.all(idx % step == 0, axis=1)
        shape = tuple(-(-s // step) for s in ps.grid_shape)
        pitch = tuple(p * step for p in ps.pitch)
        out = replace(ps, points=ps.points[keep], grid_shape=shape, pitch=pitch, _cache={})
        kept = np.flatnonzero(keep)
    else:
        m = -(-ps.n // step ** ps.d)
        out = truncate(ps, m)
        if out is ps:
            out = replace(ps, _cache={})
        kept = np.arange(m)
    out._cache["parent"] = (ps, level, kept)
    ps._cache[key] = out
    return out


def extent_box(ps: PointSet):
    """Region the samples stand for: the domain, or the cells of a lattice.

    A strided lattice is not centred in the domain any more, so its cells
    (first and last sample +- half a pitch) define where its signal ends.
    """
    if ps.grid_shape is not None and ps.pitch is not None:
        half = 0.5 * np.asarray(ps.pitch)
        return ps.points.min(axis=0) - half, ps.points.max(axis=0) + half
    return ps.domain.lo, ps.domain.hi


def restrict_points(ps: PointSet, support: Support, tol: float = 1e-9) -> PointSet:
    """Keep the samples x with ``x + S`` inside the signal region; shrink the domain to match."""
    key = ("restrict", support)
    if key in ps._cache:
        return ps._cache[key]
    box_lo, box_hi = extent_box(ps)
    lo = np.maximum(box_lo - np.asarray(support.lo), ps.domain.lo)
    hi = np.minimum(box_hi - np.asarray(support.hi), ps.domain.hi)
    if np.any(hi < lo):
        raise InsufficientPointsError("kernel support is larger than the domain")
    scale = tol * np.maximum(1.0, np.abs(ps.domain.extent))
    keep = np.all((ps.points >= lo - scale) & (ps.points <= hi + scale), axis=1)
    if not keep.any():
        raise InsufficientPointsError("no sample survives the valid-region restriction")
    dom = Domain(tuple(zip(lo.tolist(), hi.tolist())))
    pts = np.clip(ps.points[keep], lo, hi)
    shape = None
    if ps.grid_shape is not None:
        idx = _lattice_index(ps)[keep]
        shape = tuple(int(v) for v in (idx.max(axis=0) - idx.min(axis=0) + 1))
        if int(np.prod(shape)) != int(keep.sum()):
            shape = None
    out = PointSet(dom, pts, ps.generator, ps.seed, grid_shape=shape,
                   pitch=ps.pitch if shape is not None else None)
    ps._cache[key] = out
    return out


def output_points(ps: PointSet, support: Support, padding: str, stride_level: int) -> PointSet:
    """Output samples of a windowed layer: valid-region restriction, then stride."""
    if padding not in PADDINGS:
        raise ValueError(f"padding must be one of {PADDINGS}, got {padding!r}")
    base = restrict_points(ps, support) if padding == "none" else ps
    return stride_points(base, stride_level)


def _reflect_ghosts(ps: PointSet, support: Support):
    """Mirror images of samples across the domain faces within kernel reach.

    Returns (points, source_index) with the original samples first. Mirrored
    samples carry exactly the reflected function values, so no access to the
    underlying INR is needed.
    """
    key = ("ghosts", support)
    if key in ps._cache:
        return ps._cache[key]
    reach_lo = np.maximum(np.asarray(support.hi), 0.0)  # x_j - x < hi  ->  x_j < x + hi
    reach_hi = np.maximum(-np.asarray(support.lo), 0.0)
    lo, hi = extent_box(ps)
    pts, src = [ps.points], [np.arange(ps.n)]
    for axis in range(ps.d):
        new_p, new_s = [], []
        for p, s in zip(pts, src):
            # ghosts of ghosts produce the corner images
            near_lo = p[:, axis] < lo[axis] + reach_lo[axis] + reach_hi[axis]
            near_hi = p[:, axis] > hi[axis] - reach_hi[axis] - reach_lo[axis]
            a = p[near_lo].copy()
            a[:, axis] = 2 * lo[axis] - a[:, axis]
            b = p[near_hi].copy()
            b[:, axis] = 2 * hi[axis] - b[:, axis]
            new_p += [a, b]
            new_s += [s[near_lo], s[near_hi]]
        pts += new_p
        src += new_s
    out = (np.concatenate(pts), np.concatenate(src))
    ps._cache[key] = out
    return out


@dataclass
class Neighborhood:
    """Pairs (output i, source j) with ``x_j - x_i`` inside the support."""

    ps_out: PointSet
    dst: np.ndarray
    src: np.ndarray
    offsets: np.ndarray
    n_in: int
    cache: dict

    @property
    def n_out(self) -> int:
        return self.ps_out.n

    @property
    def n_pairs(self) -> int:
        return len(self.dst)

    def counts(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_out)


def _pairs(src_pts: np.ndarray, tree, queries: np.ndarray, support: Support):
    lo, hi = np.asarray(support.lo), np.asarray(support.hi)
    centres = queries + 0.5 * (lo + hi)
    radius = 0.5 * float(np.max(hi - lo)) * (1 + 1e-9) + 1e-12
    from scipy.spatial import cKDTree

    hits = cKDTree(centres).sparse_distance_matrix(tree, radius, p=np.inf, output_type="ndarray")
    dst = hits["i"].astype(np.int64)
    src = hits["j"].astype(np.int64)
    off = src_pts[src] - queries[dst]
    keep = support.contains(off)
    dst, src, off = dst[keep], src[keep], off[keep]
    order = np.lexsort((src, dst))
    return dst[order], src[order], off[order]


def neighborhood(ps: PointSet, support: Support, padding: str = "zero", stride_level: int = 0,
                 ps_out: Optional[PointSet] = None) -> Neighborhood:
    """Cached neighbour pairs for a windowed layer on ``ps``."""
    if padding not in PADDINGS:
        raise ValueError(f"padding must be one of {PADDINGS}, got {padding!r}")
    key = ("nbhd", support, padding, stride_level, None if ps_out is None else id(ps_out))
    if key in ps._cache:
        return ps._cache[key]
    out_ps = ps_out if ps_out is not None else output_points(ps, support, padding, stride_level)
    if padding == "reflect":
        if np.any(np.subtract(support.hi, support.lo) > ps.domain.extent):
            raise UnsupportedError("reflect padding needs a support smaller than the domain")
        pts, src_map = _reflect_ghosts(ps, support)
        tkey = ("ghost_tree", support)
        if tkey not in ps._cache:
            from scipy.spatial import cKDTree

            ps._cache[tkey] = cKDTree(pts)
        dst, src, off = _pairs(pts, ps._cache[tkey], out_ps.points, support)
        src = src_map[src]
    else:
        dst, src, off = _pairs(ps.points, ps.tree(), out_ps.points, support)
    nb = Neighborhood(out_ps, dst, src, off, ps.n, {})
    ps._cache[key] = nb
    return nb


# ----------------------------------------------------------------------------
# multi-scale resampling
# ----------------------------------------------------------------------------


def upsample_points(ps: PointSet, level: int):
    """Finer point set and nearest-sample map from its points to ``ps``.

    A set produced by :func:`stride_points` returns to its parent, where the
    original samples map to themselves. Otherwise the low-discrepancy
    sequence is extended.
    """
    if level <= 0:
        return ps, np.arange(ps.n)
    parent = ps._cache.get("parent")
    if parent is not None and parent[1] == level:
        big, _, kept = parent
        nn = nearest_index(ps, big.points)
        nn[kept] = np.arange(ps.n)
        return big, nn
    if parent is not None and parent[1] < level:
        mid, nn_mid = upsample_points(ps, parent[1])
        big, nn_big = upsample_points(mid, level - parent[1])
        return big, nn_mid[nn_big]
    m = ps.n * 2 ** (ps.d * level)
    return extend(ps, m)
