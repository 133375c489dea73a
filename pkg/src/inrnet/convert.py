"""Discrete CNNs, their conversion to INR-Nets, and grid-versus-QMC analyses.

The discrete forward pass here is a deliberately plain im2col implementation
that shares no code with the continuous layers; it is the oracle the
converted graphs are checked against.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from . import autodiff as ad
from .errors import ConversionError, ShapeError
from .inr import InrModel
from .layers.graph import GraphBuilder, NetworkGraph, OutputInr, forward
from .pointset import Domain, PointSet, grid_points, make_points, sobol_sequence

NORM_EPS = 1e-5


# ----------------------------------------------------------------------------
# discrete network description
# ----------------------------------------------------------------------------


@dataclass
class Conv:
    """k x k convolution (cross-correlation), weight (c_out, c_in, k, k)."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    padding_mode: str = "zeros"  # or "symmetric"


@dataclass
class Pool:
    kind: str  # "max" or "avg"
    k: int = 2
    stride: int = 2
    padding: int = 0


@dataclass
class Relu:
    pass


@dataclass
class Norm:
    """Instance normalization ``(x - mean) / (std + eps) * scale + shift``."""

    scale: np.ndarray
    shift: np.ndarray


@dataclass
class GlobalPool:
    pass


@dataclass
class AdaptivePool:
    out: tuple = (2, 2)  # (rows, cols)


@dataclass
class Dense:
    """``y = W x + b`` with W of shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray


@dataclass
class DiscreteNetSpec:
    layers: list
    resolution: tuple  # (H, W)
    in_channels: int = 1


def random_spec(seed: int = 0, resolution=(16, 16), channels=(1, 4, 6), k: int = 3, n_out: int = 3,
                pool: str = "max") -> DiscreteNetSpec:
    """Two 3x3 convolutions with ReLU, a 2x2 pool, global pooling and a dense head."""
    rng = np.random.default_rng(seed)
    c0, c1, c2 = channels
    p = (k - 1) // 2
    layers = [
        Conv(rng.normal(size=(c1, c0, k, k)) / k, rng.normal(size=c1) * 0.1, 1, p),
        Relu(),
        Pool(pool, 2, 2),
        Conv(rng.normal(size=(c2, c1, k, k)) / (k * np.sqrt(c1)), rng.normal(size=c2) * 0.1, 1, p),
        Relu(),
        GlobalPool(),
        Dense(rng.normal(size=(n_out, c2)), rng.normal(size=n_out) * 0.1),
    ]
    return DiscreteNetSpec(layers, tuple(resolution), c0)


# ----------------------------------------------------------------------------
# oracle
# ----------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(C, H, W) -> (H_out, W_out, C, k, k) windows."""
    c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    cols = np.empty((ho, wo, c, k, k), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, :, a, b] = x[:, a : a + stride * ho : stride, b : b + stride * wo : stride].transpose(1, 2, 0)
    return cols


def _pad(x: np.ndarray, p: int, mode: str, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    if mode == "symmetric":
        return np.pad(x, ((0, 0), (p, p), (p, p)), mode="symmetric")
    return np.pad(x, ((0, 0), (p, p), (p, p)), mode="constant", constant_values=value)


def discrete_forward(spec: DiscreteNetSpec, image: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Reference forward pass on an (H, W, c) image.

    Returns a vector after global/adaptive pooling and dense layers,
    otherwise the final (H', W', c) feature map.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape != (*spec.resolution, spec.in_channels):
        raise ShapeError(f"image {img.shape} does not match {(*spec.resolution, spec.in_channels)}")
    x = img.transpose(2, 0, 1).astype(dtype)  # (C, H, W)
    vec = None
    for layer in spec.layers:
        if isinstance(layer, Conv):
            w = layer.weight.astype(dtype)
            k = w.shape[-1]
            cols = _im2col(_pad(x, layer.padding, layer.padding_mode), k, layer.stride)
            x = np.einsum("hwcab,ocab->ohw", cols, w)
            if layer.bias is not None:
                x = x + layer.bias.astype(dtype)[:, None, None]
        elif isinstance(layer, Pool):
            pad_val = -np.inf if layer.kind == "max" else 0.0
            cols = _im2col(_pad(x, layer.padding, "zeros", pad_val), layer.k, layer.stride)
            red = cols.max(axis=(3, 4)) if layer.kind == "max" else cols.mean(axis=(3, 4))
            x = red.transpose(2, 0, 1)
        elif isinstance(layer, Relu):
            if vec is None:
                x = np.maximum(x, 0)
            else:
                vec = np.maximum(vec, 0)
        elif isinstance(layer, Norm):
            mu = x.mean(axis=(1, 2), keepdims=True)
            sd = np.sqrt(np.maximum((x * x).mean(axis=(1, 2), keepdims=True) - mu * mu, 0))
            x = (x - mu) / (sd + NORM_EPS) * layer.scale.astype(dtype)[:, None, None] \
                + layer.shift.astype(dtype)[:, None, None]
        elif isinstance(layer, GlobalPool):
            vec = x.mean(axis=(1, 2))
        elif isinstance(layer, AdaptivePool):
            rows, cols_ = layer.out
            c, h, w = x.shape
            if h % rows or w % cols_:
                raise ShapeError("adaptive pooling needs sizes divisible by the output grid")
            vec = x.reshape(c, rows, h // rows, cols_, w // cols_).mean(axis=(2, 4)).reshape(-1)
        elif isinstance(layer, Dense):
            if vec is None:
                raise ShapeError("dense layer needs a pooled vector input")
            vec = layer.weight.astype(dtype) @ vec + layer.bias.astype(dtype)
        else:
            raise ConversionError(f"unsupported layer {type(layer).__name__}")
    if vec is not None:
        return vec.astype(dtype)
    return x.transpose(1, 2, 0).astype(dtype)


# ----------------------------------------------------------------------------
# conversion
# ----------------------------------------------------------------------------


def _stride_level(stride: int, where: str) -> int:
    level = int(round(math.log2(stride))) if stride > 0 else -1
    if level < 0 or 2 ** level != stride:
        raise ConversionError(f"{where}: stride {stride} is not a power of two")
    return level


def image_domain() -> Domain:
    return Domain.cube(2, -1.0, 1.0)


def convert_network(spec: DiscreteNetSpec) -> NetworkGraph:
    """INR-Net reproducing ``spec`` exactly on its pixel grid.

    Parameters are created at the ambient autodiff precision.
    """
    h, w = spec.resolution
    dom = image_domain()
    pitch = [float(dom.extent[0]) / w, float(dom.extent[1]) / h]
    has_vec = any(isinstance(l, (GlobalPool, AdaptivePool)) for l in spec.layers)
    b = GraphBuilder("inr->vector" if has_vec else "inr->inr", spec.in_channels)
    vec = False
    for i, layer in enumerate(spec.layers):
        where = f"layer {i} ({type(layer).__name__})"
        if isinstance(layer, Conv):
            co, ci, kh, kw = layer.weight.shape
            if kh != kw:
                raise ConversionError(f"{where}: only square kernels are supported")
            k, p = kw, layer.padding
            level = _stride_level(layer.stride, where)
            if k == 1 and p == 0:
                if level:
                    raise ConversionError(f"{where}: strided 1x1 convolutions are not supported")
                bias = np.zeros(co) if layer.bias is None else layer.bias
                b.linear(co, W=layer.weight[:, :, 0, 0].T.copy(), b=bias)
                continue
            if p == 0:
                padding, pad = "none", [0, 0] if k % 2 == 0 else None
            elif k % 2 == 1 and p == (k - 1) // 2:
                padding, pad = ("reflect" if layer.padding_mode == "symmetric" else "zero"), None
            else:
                raise ConversionError(f"{where}: padding {p} with kernel {k} is not supported")
            if layer.padding_mode not in ("zeros", "symmetric"):
                raise ConversionError(f"{where}: padding mode {layer.padding_mode!r} is not supported")
            b.conv(co, k=k, pitch=pitch, padding=padding, stride=level, weights=layer.weight,
                   bias=layer.bias, pad=pad, use_bias=layer.bias is not None)
            pitch = [q * 2 ** level for q in pitch]
        elif isinstance(layer, Pool):
            level = _stride_level(layer.stride, where)
            if layer.padding == 0:
                padding, pad = "none", [0, 0] if layer.k % 2 == 0 else None
            elif layer.k % 2 == 1 and layer.padding == (layer.k - 1) // 2:
                padding, pad = "zero", None
            else:
                raise ConversionError(f"{where}: pooling padding {layer.padding} is not supported")
            if layer.kind == "max":
                b.maxpool(layer.k, pitch, level, calibrate=False, padding=padding, pad=pad)
            elif layer.kind == "avg":
                b.avgpool(layer.k, pitch, level, padding=padding, pad=pad)
            else:
                raise ConversionError(f"{where}: unknown pooling kind {layer.kind!r}")
            pitch = [q * 2 ** level for q in pitch]
        elif isinstance(layer, Relu):
            b.relu()
        elif isinstance(layer, Norm):
            if vec:
                raise ConversionError(f"{where}: normalization after pooling to a vector")
            b.norm("instance", scale=layer.scale, shift=layer.shift)
        elif isinstance(layer, GlobalPool):
            b.global_pool()
            vec = True
        elif isinstance(layer, AdaptivePool):
            rows, cols = layer.out
            b.adaptive_pool((cols, rows), 0)
            vec = True
        elif isinstance(layer, Dense):
            if not vec:
                raise ConversionError(f"{where}: dense layer before pooling")
            b.dense(layer.weight.shape[0], W=layer.weight.T.copy(), b=layer.bias)
        else:
            raise ConversionError(f"{where}: unsupported layer kind")
    if not b.nodes:
        # identity network: a single relu-free pass-through
        return NetworkGraph("inr->inr", spec.in_channels, [], "input")
    return b.build()


# ----------------------------------------------------------------------------
# analyses
# ----------------------------------------------------------------------------


def image_points(spec: DiscreteNetSpec) -> PointSet:
    h, w = spec.resolution
    return grid_points([w, h], image_domain())


def image_values(image: np.ndarray) -> np.ndarray:
    """(H, W, c) pixels to (N, c) sample values, first coordinate (column) fastest."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    return img.reshape(-1, img.shape[2])


def _graph_output(graph: NetworkGraph, values, ps: PointSet) -> np.ndarray:
    out = forward(graph, values, ps)
    if isinstance(out, OutputInr):
        return out.values.data[0]
    return out.data[0]


def _discrete_as_samples(ref: np.ndarray) -> np.ndarray:
    if ref.ndim == 3:
        return ref.reshape(-1, ref.shape[2])
    return ref


def grid_equivalence_check(spec: DiscreteNetSpec, graph: Optional[NetworkGraph], image: np.ndarray,
                           dtype=np.float32) -> float:
    """Max abs difference between the converted graph on the pixel grid and the oracle.

    With ``dtype=float64`` the graph is rebuilt at double precision.
    """
    with ad.precision(dtype):
        g = convert_network(spec) if graph is None or dtype != np.float32 else graph
        ps = image_points(spec)
        vals = ad.Value(image_values(image)[None].astype(dtype))
        cont = _graph_output(g, vals, ps)
    ref = _discrete_as_samples(discrete_forward(spec, image, dtype))
    if cont.shape != ref.shape:
        raise ShapeError(f"graph output {cont.shape} vs oracle {ref.shape}")
    return float(np.max(np.abs(cont.astype(np.float64) - ref.astype(np.float64)))) if ref.size else 0.0


def bilinear_sampler(image: np.ndarray, domain: Optional[Domain] = None) -> Callable:
    """Continuous function through the pixel centres (clamped at the border)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, _ = img.shape
    domain = domain or image_domain()

    def f(points: np.ndarray) -> np.ndarray:
        u = domain.to_unit(points)
        cx = np.clip(u[:, 0] * w - 0.5, 0, w - 1)
        cy = np.clip(u[:, 1] * h - 0.5, 0, h - 1)
        x0 = np.minimum(np.floor(cx).astype(int), w - 2 if w > 1 else 0)
        y0 = np.minimum(np.floor(cy).astype(int), h - 2 if h > 1 else 0)
        tx = (cx - x0)[:, None]
        ty = (cy - y0)[:, None]
        x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
        return ((1 - ty) * ((1 - tx) * img[y0, x0] + tx * img[y0, x1])
                + ty * ((1 - tx) * img[y1, x0] + tx * img[y1, x1]))

    return f


def match_points(grid: np.ndarray, targets: np.ndarray, method: str = "greedy") -> np.ndarray:
    """Index of the target paired with each grid point (a permutation)."""
    n = len(grid)
    if method == "hungarian":
        cost = np.linalg.norm(grid[:, None, :] - targets[None, :, :], axis=2)
        _, cols = linear_sum_assignment(cost)
        return cols
    if method != "greedy":
        raise ValueError(f"unknown matching method {method!r}")
    tree = cKDTree(targets)
    used = np.zeros(n, dtype=bool)
    pair = np.empty(n, dtype=np.int64)
    for i in range(n):
        k = 8
        while True:
            _, idx = tree.query(grid[i], k=min(k, n))
            idx = np.atleast_1d(idx)
            free = idx[~used[idx]]
            if len(free):
                pair[i] = free[0]
                used[free[0]] = True
                break
            if k >= n:
                raise RuntimeError("matching ran out of targets")
            k *= 4
    return pair


def interpolation_deviation(spec: DiscreteNetSpec, graph: NetworkGraph, image, alphas: Sequence[float],
                            seed: Optional[int] = None, method: str = "greedy") -> list:
    """Output distance to the oracle as samples slide from the grid to Sobol points.

    ``image`` is an (H, W, c) array (sampled off-grid by bilinear
    interpolation) or any callable/INR evaluable at coordinates. Returns a
    list of ``(alpha, distance)`` with distance the max abs output difference.
    """
    grid = image_points(spec)
    sob = sobol_sequence(2, grid.n, seed, grid.domain).points
    pair = match_points(grid.points, sob, method)
    if isinstance(image, np.ndarray):
        fn, pixels = bilinear_sampler(image), image
    else:
        fn = image
        pixels = np.asarray(image(grid.points) if callable(image) else None).reshape(
            spec.resolution[0], spec.resolution[1], -1)
    ref = _discrete_as_samples(discrete_forward(spec, pixels))
    rows = []
    for a in alphas:
        pts = (1 - a) * grid.points + a * sob[pair]
        if a == 0:
            ps = grid
            vals = image_values(pixels)
        else:
            ps = PointSet(grid.domain, pts, "custom", grid_shape=grid.grid_shape, pitch=grid.pitch)
            vals = _eval_input(fn, ps)
        out = _graph_output(graph, ad.Value(vals[None]), ps)
        rows.append((float(a), float(np.max(np.abs(out.astype(np.float64) - ref)))))
    return rows


def _eval_input(src, ps: PointSet) -> np.ndarray:
    if isinstance(src, InrModel):
        from .inr import evaluate_many

        return evaluate_many([src], ps)[0]
    return np.asarray(src(ps.points)).reshape(ps.n, -1)


def _points_for(sampler: str, n: int, seed: Optional[int]) -> PointSet:
    if sampler == "grid":
        side = int(round(math.sqrt(n)))
        return grid_points([side, side], image_domain())
    return make_points(sampler, 2, n, image_domain(), seed)


def resolution_stability(graph: NetworkGraph, inr, point_counts: Sequence[int],
                         samplers: Sequence[str] = ("grid", "sobol"), base_side: int = 32,
                         seed: Optional[int] = 0) -> list:
    """Distance of the graph output at each point count from its base-grid output.

    Returns ``(n_points, sampler, distance)`` rows; distance is the Euclidean
    norm of the output difference (vector outputs) or of the per-sample
    difference at the base points (INR outputs, nearest-sample lookup).
    """
    base_ps = grid_points([base_side, base_side], image_domain())
    base = forward(graph, _eval_input(inr, base_ps)[None], base_ps)
    rows = []
    for sampler in samplers:
        for n in point_counts:
            ps = _points_for(sampler, n, seed)
            out = forward(graph, _eval_input(inr, ps)[None], ps)
            if isinstance(out, OutputInr):
                dist = np.linalg.norm(out(base_ps.points) - base.values.data) / math.sqrt(base_ps.n)
            else:
                dist = np.linalg.norm(out.data - base.data)
            rows.append((int(ps.n), sampler, float(dist)))
    return rows


def to_csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()
