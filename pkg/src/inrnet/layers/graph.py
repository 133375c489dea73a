"""INR-Net graphs: a DAG of continuous layers with a forward pass and a file format.

A graph maps an INR (sampled on a point set) or a vector to a vector or an
:class:`OutputInr`. Field-valued tensors are (B, N, c) values bound to a
point set; vector tensors are (B, k).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Value
from ..errors import (
    BadMagicError,
    GraphError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from ..inr import InrModel, evaluate_many
from ..pointset import Domain, PointSet, nearest_index
from . import basis as _basis
from . import conv as _conv
from . import pointwise as _pw
from .kernels import GaussianKernel, KernelSpline, MlpKernel, Support, VoronoiBins

IO_SIGNATURES = ("inr->vector", "inr->inr", "vector->inr", "vector->vector")
FIELD, VECTOR = "field", "vector"

INGR_MAGIC = b"INGR"
INGR_VERSION = 1


@dataclass
class Node:
    name: str
    kind: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict, repr=False)


@dataclass
class Field:
    values: Value
    ps: PointSet


# ----------------------------------------------------------------------------
# per-kind type inference
# ----------------------------------------------------------------------------


def _same_kind(node, types, want):
    for name, (kind, _) in zip(node.inputs, types):
        if kind != want:
            raise GraphError(f"node {node.name!r} ({node.kind}) needs a {want} input, {name!r} is a {kind}")


def _infer(node: Node, types: list) -> tuple:
    k, a = node.kind, node.attrs
    n_in = {"add": 2}.get(k, 1)
    if len(types) != n_in:
        raise GraphError(f"node {node.name!r} ({k}) takes {n_in} input(s), got {len(types)}")
    c = types[0][1]
    if k == "conv":
        _same_kind(node, types, FIELD)
        if a["c_in"] != c:
            raise GraphError(f"conv {node.name!r} expects {a['c_in']} channels, input has {c}")
        return FIELD, a["c_out"]
    if k == "linear":
        _same_kind(node, types, FIELD)
        if node.params["W"].shape[0] != c:
            raise GraphError(f"linear {node.name!r} expects {node.params['W'].shape[0]} channels, got {c}")
        return FIELD, node.params["W"].shape[1]
    if k in ("norm", "maxpool", "avgpool", "down", "up"):
        _same_kind(node, types, FIELD)
        if k == "norm" and node.params["scale"].shape[-1] != c:
            raise GraphError(f"norm {node.name!r} has {node.params['scale'].shape[-1]} channels, input {c}")
        return FIELD, c
    if k == "posenc":
        _same_kind(node, types, FIELD)
        return FIELD, c + 2 * a["n_freq"] * a["d"]
    if k == "relu":
        return types[0]
    if k == "add":
        if types[0] != types[1]:
            raise GraphError(f"add {node.name!r} joins mismatched inputs {types[0]} and {types[1]}")
        return types[0]
    if k == "global_pool":
        _same_kind(node, types, FIELD)
        return VECTOR, c
    if k == "adaptive_pool":
        _same_kind(node, types, FIELD)
        n_fun = len(_basis.LegendreBasis(Domain.cube(len(a["splits"])), a["max_degree"]))
        return VECTOR, c * int(np.prod(a["splits"])) * n_fun
    if k == "legendre_project":
        _same_kind(node, types, FIELD)
        return VECTOR, c * len(_basis.LegendreBasis(Domain.cube(a["d"]), a["max_degree"]))
    if k == "dense":
        _same_kind(node, types, VECTOR)
        if node.params["W"].shape[0] != c:
            raise GraphError(f"dense {node.name!r} expects {node.params['W'].shape[0]} inputs, got {c}")
        return VECTOR, node.params["W"].shape[1]
    if k == "legendre_head":
        _same_kind(node, types, VECTOR)
        n_fun = len(_basis.LegendreBasis(Domain.cube(a["d"]), a["max_degree"]))
        if c != n_fun * a["channels"]:
            raise GraphError(f"legendre_head {node.name!r} needs {n_fun * a['channels']} inputs, got {c}")
        return FIELD, a["channels"]
    if k == "group_prod":
        _same_kind(node, types, VECTOR)
        if c % a["group"]:
            raise GraphError(f"group_prod {node.name!r}: {c} inputs not divisible by {a['group']}")
        return VECTOR, c // a["group"]
    raise GraphError(f"unknown node kind {k!r}")


# ----------------------------------------------------------------------------
# graph
# ----------------------------------------------------------------------------


class NetworkGraph:
    """Validated DAG of layer nodes with a single input and a single output."""

    def __init__(self, io: str, in_channels: int, nodes: Sequence[Node], output: Optional[str] = None,
                 d: int = 2):
        if io not in IO_SIGNATURES:
            raise GraphError(f"io signature must be one of {IO_SIGNATURES}, got {io!r}")
        self.io = io
        self.in_channels = int(in_channels)
        self.d = d
        self.nodes = list(nodes)
        self.output = output or (self.nodes[-1].name if self.nodes else "input")
        self.training = False
        self._order, self._types = self._validate()

    # -- validation -------------------------------------------------------------

    def _validate(self):
        by_name = {}
        for n in self.nodes:
            if n.name in by_name or n.name == "input":
                raise GraphError(f"duplicate node name {n.name!r}")
            by_name[n.name] = n
        in_kind = FIELD if self.io.startswith("inr") else VECTOR
        types = {"input": (in_kind, self.in_channels)}
        order, state = [], {}

        def visit(name, stack):
            if name == "input":
                return
            if name not in by_name:
                raise GraphError(f"unknown node {name!r} referenced by {stack[-1] if stack else 'output'!r}")
            st = state.get(name)
            if st == "done":
                return
            if st == "active":
                raise GraphError(f"cycle detected through {' -> '.join(stack + [name])}")
            state[name] = "active"
            for dep in by_name[name].inputs:
                visit(dep, stack + [name])
            state[name] = "done"
            order.append(by_name[name])

        for n in self.nodes:
            visit(n.name, [])
        visit(self.output, [])
        for n in order:
            types[n.name] = _infer(n, [types[i] for i in n.inputs])
        out_kind = FIELD if self.io.endswith("inr") else VECTOR
        if types[self.output][0] != out_kind:
            raise GraphError(f"graph output is a {types[self.output][0]}, io {self.io!r} needs a {out_kind}")
        return order, types

    @property
    def out_channels(self) -> int:
        return self._types[self.output][1]

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def params(self) -> list:
        return [p for n in self.nodes for _, p in sorted(n.params.items())]

    def layers_with_params(self) -> list:
        return [n for n in self.nodes if n.params]

    def train(self, mode: bool = True) -> "NetworkGraph":
        self.training = mode
        return self

    def eval(self) -> "NetworkGraph":
        return self.train(False)

    def state(self) -> dict:
        """Copy of all parameters and buffers keyed ``node.name``."""
        out = {}
        for n in self.nodes:
            for k, p in n.params.items():
                out[f"{n.name}.{k}"] = p.data.copy()
            for k, b in n.buffers.items():
                out[f"{n.name}.{k}"] = np.array(b, copy=True)
        return out

    def astype(self, dtype) -> "NetworkGraph":
        """Cast parameters in place (e.g. float64 for exactness checks)."""
        for n in self.nodes:
            for k, p in n.params.items():
                n.params[k] = ad.parameter(p.data.astype(dtype), dtype=dtype)
            n.runtime.clear()
        return self


# ----------------------------------------------------------------------------
# runtime
# ----------------------------------------------------------------------------


def _support(node: Node) -> Support:
    a = node.attrs
    if a.get("support") is not None:
        lo, hi = a["support"]
        return Support(tuple(lo), tuple(hi))
    return Support.for_taps(a["k"], a["pitch"], a.get("pad"))


def _conv_kernel(node: Node):
    if "kernel" in node.runtime:
        return node.runtime["kernel"]
    a, p = node.attrs, node.params
    kind = a["kernel"]
    if kind == "spline":
        ker = KernelSpline(tuple(a["k"]), a["c_in"], a["c_out"], tuple(a["pitch"]), control=p["control"],
                           order=a["order"], pad=a.get("pad"))
    elif kind == "mlp":
        n_w = len([k for k in p if k.startswith("mlp_w")])
        weights = []
        for i in range(n_w):
            weights += [p[f"mlp_w{i}"], p[f"mlp_b{i}"]]
        ker = MlpKernel(a["c_in"], a["c_out"], tuple(a["pitch"]), _support(node), hidden=a["hidden"],
                        weights=weights)
    elif kind == "gauss":
        ker = GaussianKernel(a["c_in"], a["c_out"], tuple(a["pitch"]), _support(node), width=a["width"],
                             amplitude=p["amplitude"])
    else:
        raise GraphError(f"unknown kernel kind {kind!r}")
    node.runtime["kernel"] = ker
    if a.get("n_bins"):
        node.runtime["bins"] = VoronoiBins.sobol(ker.support, a["n_bins"])
    return ker


def _run(node: Node, ins: list, ctx: dict):
    k, a, p = node.kind, node.attrs, node.params
    x = ins[0]
    if k == "conv":
        ker = _conv_kernel(node)
        if a.get("n_bins"):
            v, ps = _conv.conv_binned(x.values, x.ps, ker, node.runtime["bins"], p.get("bias"),
                                      a["padding"], a["stride"])
        else:
            v, ps = _conv.conv_forward(x.values, x.ps, ker, p.get("bias"), a["padding"], a["stride"])
        return Field(v, ps)
    if k == "linear":
        return Field(_pw.linear_combination(x.values, p["W"], p.get("b"), a.get("normalized", False)), x.ps)
    if k == "norm":
        state = node.runtime.get("state")
        if state is None and a["mode"] == "batch":
            state = _pw.NormState(p["scale"].shape[-1])
            state.mean = np.asarray(node.buffers["running_mean"], dtype=np.float64)
            state.var = np.asarray(node.buffers["running_var"], dtype=np.float64)
            node.runtime["state"] = state
        v = _pw.normalize(x.values, x.ps, a["mode"], p["scale"], p["shift"], state, ctx["training"])
        if state is not None:
            node.buffers["running_mean"] = state.mean
            node.buffers["running_var"] = state.var
        return Field(v, x.ps)
    if k in ("maxpool", "avgpool"):
        win = _conv.window_support(tuple(a["k"]), tuple(a["pitch"]), a.get("pad"))
        if k == "maxpool":
            v, ps = _conv.max_pool(x.values, x.ps, win, a["stride"], a.get("calibrate", False),
                                   a.get("constant", 1.0), a["padding"])
        else:
            v, ps = _conv.avg_pool(x.values, x.ps, win, a["stride"], a["padding"])
        return Field(v, ps)
    if k == "relu":
        if isinstance(x, Field):
            return Field(x.values.relu(), x.ps)
        return x.relu()
    if k == "posenc":
        return Field(_pw.positional_encoding(x.values, x.ps, a["n_freq"]), x.ps)
    if k == "down":
        v, ps = _pw.downsample(x.values, x.ps, a["level"])
        return Field(v, ps)
    if k == "up":
        v, ps = _pw.upsample(x.values, x.ps, a["level"])
        return Field(v, ps)
    if k == "add":
        y = ins[1]
        if isinstance(x, Field):
            if not x.ps.same_points(y.ps):
                raise GraphError(f"add {node.name!r}: inputs live on different point sets "
                                 f"({x.ps.n} vs {y.ps.n} samples)")
            return Field(x.values + y.values, x.ps)
        return x + y
    if k == "global_pool":
        return _pw.global_pool(x.values, x.ps)
    if k == "adaptive_pool":
        regions = _basis.grid_regions(x.ps.domain, a["splits"])
        emb = _basis.embed(_basis.tokenize(x.values, x.ps, regions), x.ps, regions, a["max_degree"])
        b, r, kc = emb.shape
        c = x.values.shape[2]
        # channel-major flattening (c, region, function), like flattening a (c, h, w) map
        return emb.reshape(b, r, kc // c, c).transpose((0, 3, 1, 2)).reshape(b, r * kc)
    if k == "legendre_project":
        return _basis.legendre_project(x.values, x.ps, _basis.LegendreBasis(x.ps.domain, a["max_degree"]))
    if k == "dense":
        return ad.matmul(x, p["W"]) + p["b"]
    if k == "legendre_head":
        ps = ctx["ps"]
        if ps is None:
            raise GraphError("a vector->inr graph needs a point set to sample its output")
        return Field(_basis.legendre_expand(x, ps, _basis.LegendreBasis(ps.domain, a["max_degree"]),
                                            a["channels"]), ps)
    if k == "group_prod":
        g = a["group"]
        v = x.reshape(x.shape[0], x.shape[1] // g, g)
        out = v[:, :, 0]
        for i in range(1, g):
            out = out * v[:, :, i]
        return out
    raise GraphError(f"unknown node kind {k!r}")


class OutputInr:
    """Implicit output of an INR->INR network.

    Sample values are computed on first access, which in turn evaluates the
    input INR on the point set. Queries at arbitrary coordinates return the
    value of the nearest sample.
    """

    def __init__(self, compute: Callable[[], Field]):
        self._compute = compute
        self._field: Optional[Field] = None

    def _get(self) -> Field:
        if self._field is None:
            self._field = self._compute()
        return self._field

    @property
    def values(self) -> Value:
        return self._get().values

    @property
    def ps(self) -> PointSet:
        return self._get().ps

    def lookup(self, coords: np.ndarray, index: Optional[int] = None) -> Value:
        """Differentiable values at ``coords``: (B, Q, c), or (Q, c) for one batch entry."""
        f = self._get()
        nn = nearest_index(f.ps, coords)
        v = f.values if index is None else f.values[index]
        return v.take(nn, axis=-2)

    def __call__(self, coords: np.ndarray, index: Optional[int] = None) -> np.ndarray:
        return self.lookup(coords, index).data


def _input_values(x, ps: Optional[PointSet]):
    if ps is None:
        raise GraphError("an INR input needs a point set")
    if isinstance(x, InrModel):
        return Value(evaluate_many([x], ps))
    if isinstance(x, (list, tuple)) and x and all(isinstance(m, InrModel) for m in x):
        return Value(evaluate_many(list(x), ps))
    if isinstance(x, (list, tuple)) and x and all(callable(m) for m in x):
        return Value(np.stack([np.asarray(m(ps.points)).reshape(ps.n, -1) for m in x]))
    if callable(x) and not isinstance(x, (np.ndarray, Value)):
        return Value(np.asarray(x(ps.points)).reshape(1, ps.n, -1))
    v = ad.as_value(x)
    if v.ndim == 2:
        v = v.reshape(1, *v.shape)
    if v.ndim != 3 or v.shape[1] != ps.n:
        raise ShapeError(f"input values {v.shape} do not match {ps.n} samples")
    return v


def forward(graph: NetworkGraph, x, ps: Optional[PointSet] = None, training: Optional[bool] = None):
    """Run ``graph`` on an INR (model, callable or sampled values) or a vector batch.

    Returns a (B, k) Value for vector outputs and an :class:`OutputInr` for
    INR outputs.
    """
    training = graph.training if training is None else training
    vector_in = graph.io.startswith("vector")
    is_vec = isinstance(x, (np.ndarray, Value)) and np.ndim(x.data if isinstance(x, Value) else x) == 2 \
        and vector_in
    if vector_in and not is_vec:
        raise GraphError(f"graph io {graph.io!r} expects a (B, k) vector input")
    if not vector_in and isinstance(x, (np.ndarray, Value)) and ps is None:
        raise GraphError(f"graph io {graph.io!r} expects an INR input with a point set")

    def run() -> object:
        ctx = {"training": training, "ps": ps}
        if vector_in:
            v = ad.as_value(x)
            if v.shape[1] != graph.in_channels:
                raise ShapeError(f"graph expects {graph.in_channels} inputs, got {v.shape[1]}")
            acts = {"input": v}
        else:
            vals = _input_values(x, ps)
            if vals.shape[2] != graph.in_channels:
                raise ShapeError(f"graph expects {graph.in_channels} channels, input has {vals.shape[2]}")
            acts = {"input": Field(vals, ps)}
        for node in graph._order:
            acts[node.name] = _run(node, [acts[i] for i in node.inputs], ctx)
        return acts[graph.output]

    if graph.io.endswith("inr"):
        return OutputInr(run)
    return run()


# ----------------------------------------------------------------------------
# builder
# ----------------------------------------------------------------------------


def _glorot(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class GraphBuilder:
    """Incremental construction of a :class:`NetworkGraph`.

    Each method appends one node fed by ``src`` (default: the previous node)
    and returns its name.
    """

    def __init__(self, io: str = "inr->vector", in_channels: int = 1, d: int = 2, seed: int = 0):
        self.io, self.in_channels, self.d = io, in_channels, d
        self.rng = np.random.default_rng(seed)
        self.nodes: list = []
        self._channels = {"input": in_channels}
        self._last = "input"

    def _add(self, kind, src, attrs=None, params=None, buffers=None, name=None, channels=None, extra=()):
        src = self._last if src is None else src
        name = name or f"{kind}{len(self.nodes)}"
        params = {k: (v if isinstance(v, Value) else ad.parameter(v)) for k, v in (params or {}).items()}
        node = Node(name, kind, (src, *extra), dict(attrs or {}), params, dict(buffers or {}))
        self.nodes.append(node)
        self._channels[name] = self._channels[src] if channels is None else channels
        self._last = name
        return name

    def channels(self, name: Optional[str] = None) -> int:
        return self._channels[name or self._last]

    def conv(self, c_out: int, k=3, pitch=0.125, kernel: str = "spline", padding: str = "zero",
             stride: int = 0, n_bins: int = 0, src=None, name=None, weights=None, bias=None,
             pad=None, order=None, hidden=(16,), width: float = 1.0, support=None, use_bias: bool = True):
        c_in = self.channels(src)
        k = (k, k) if np.isscalar(k) else tuple(k)
        pitch = (pitch, pitch) if np.isscalar(pitch) else tuple(pitch)
        attrs = {"kernel": kernel, "k": list(k), "pitch": list(pitch), "c_in": c_in, "c_out": c_out,
                 "padding": padding, "stride": stride, "n_bins": n_bins,
                 "pad": None if pad is None else list(pad), "support": support}
        seed = int(self.rng.integers(2 ** 31))
        params = {}
        if kernel == "spline":
            if weights is not None:
                ker = KernelSpline.from_weights(weights, pitch, pad=pad, order=order)
            else:
                ker = KernelSpline(k, c_in, c_out, pitch, order=order, pad=pad, seed=seed)
            attrs["order"] = ker.order
            attrs["pad"] = list(ker.pad)
            params["control"] = ker.control
        elif kernel == "mlp":
            sup = Support(*support) if support is not None else Support.for_taps(k, pitch, pad)
            attrs["support"] = [list(sup.lo), list(sup.hi)]
            attrs["hidden"] = list(hidden)
            ker = MlpKernel(c_in, c_out, pitch, sup, hidden=hidden, seed=seed)
            for i in range(len(ker.weights) // 2):
                params[f"mlp_w{i}"] = ker.weights[2 * i]
                params[f"mlp_b{i}"] = ker.weights[2 * i + 1]
        elif kernel == "gauss":
            sup = Support(*support) if support is not None else Support.for_taps(k, pitch, pad)
            attrs["support"] = [list(sup.lo), list(sup.hi)]
            attrs["width"] = width
            params["amplitude"] = GaussianKernel(c_in, c_out, pitch, sup, width, seed=seed).amplitude
        else:
            raise GraphError(f"unknown kernel kind {kernel!r}")
        if use_bias:
            params["bias"] = np.zeros(c_out) if bias is None else np.asarray(bias, dtype=np.float64)
        return self._add("conv", src, attrs, params, name=name, channels=c_out)

    def linear(self, c_out: int, src=None, name=None, W=None, b=None, normalized: bool = False):
        c_in = self.channels(src)
        W = _glorot(self.rng, c_in, c_out, (c_in, c_out)) if W is None else W
        b = np.zeros(c_out) if b is None else b
        return self._add("linear", src, {"normalized": normalized}, {"W": W, "b": b}, name=name,
                         channels=c_out)

    def norm(self, mode: str = "instance", src=None, name=None, scale=None, shift=None):
        c = self.channels(src)
        params = {"scale": np.ones(c) if scale is None else scale,
                  "shift": np.zeros(c) if shift is None else shift}
        buffers = {"running_mean": np.zeros(c), "running_var": np.ones(c)} if mode == "batch" else {}
        return self._add("norm", src, {"mode": mode}, params, buffers, name=name)

    def relu(self, src=None, name=None):
        return self._add("relu", src, name=name)

    def maxpool(self, k=2, pitch=0.125, stride: int = 1, calibrate: bool = False, constant: float = 1.0,
                padding: str = "none", src=None, name=None, pad=None):
        k = [k, k] if np.isscalar(k) else list(k)
        pitch = [pitch, pitch] if np.isscalar(pitch) else list(pitch)
        return self._add("maxpool", src, {"k": k, "pitch": pitch, "stride": stride, "calibrate": calibrate,
                                          "constant": constant, "padding": padding, "pad": pad}, name=name)

    def avgpool(self, k=2, pitch=0.125, stride: int = 1, padding: str = "none", src=None, name=None, pad=None):
        k = [k, k] if np.isscalar(k) else list(k)
        pitch = [pitch, pitch] if np.isscalar(pitch) else list(pitch)
        return self._add("avgpool", src, {"k": k, "pitch": pitch, "stride": stride, "padding": padding,
                                          "pad": pad}, name=name)

    def posenc(self, n_freq: int, src=None, name=None):
        c = self.channels(src)
        return self._add("posenc", src, {"n_freq": n_freq, "d": self.d}, name=name,
                         channels=c + 2 * n_freq * self.d)

    def down(self, level: int = 1, src=None, name=None):
        return self._add("down", src, {"level": level}, name=name)

    def up(self, level: int = 1, src=None, name=None):
        return self._add("up", src, {"level": level}, name=name)

    def add(self, a: str, b: str, name=None):
        return self._add("add", a, name=name, extra=(b,))

    def global_pool(self, src=None, name=None):
        return self._add("global_pool", src, name=name)

    def adaptive_pool(self, splits=(2, 2), max_degree: int = 0, src=None, name=None):
        c = self.channels(src)
        n_fun = len(_basis.LegendreBasis(Domain.cube(self.d), max_degree))
        return self._add("adaptive_pool", src, {"splits": list(splits), "max_degree": max_degree}, name=name,
                         channels=c * int(np.prod(splits)) * n_fun)

    def legendre_project(self, max_degree: int = 2, src=None, name=None):
        c = self.channels(src)
        n_fun = len(_basis.LegendreBasis(Domain.cube(self.d), max_degree))
        return self._add("legendre_project", src, {"max_degree": max_degree, "d": self.d}, name=name,
                         channels=c * n_fun)

    def dense(self, n_out: int, src=None, name=None, W=None, b=None):
        n_in = self.channels(src)
        W = _glorot(self.rng, n_in, n_out, (n_in, n_out)) if W is None else W
        b = np.zeros(n_out) if b is None else b
        return self._add("dense", src, params={"W": W, "b": b}, name=name, channels=n_out)

    def legendre_head(self, channels: int, max_degree: int = 2, src=None, name=None):
        return self._add("legendre_head", src, {"channels": channels, "max_degree": max_degree, "d": self.d},
                         name=name, channels=channels)

    def group_prod(self, group: int, src=None, name=None):
        return self._add("group_prod", src, {"group": group}, name=name,
                         channels=self.channels(src) // group)

    def build(self, output: Optional[str] = None) -> NetworkGraph:
        return NetworkGraph(self.io, self.in_channels, self.nodes, output or self._last, d=self.d)


# ----------------------------------------------------------------------------
# INGR container
# ----------------------------------------------------------------------------


def _describe(graph: NetworkGraph) -> dict:
    return {
        "io": graph.io,
        "in_channels": graph.in_channels,
        "d": graph.d,
        "output": graph.output,
        "nodes": [
            {
                "name": n.name,
                "kind": n.kind,
                "inputs": list(n.inputs),
                "attrs": n.attrs,
                "params": [[k, list(n.params[k].shape)] for k in sorted(n.params)],
                "buffers": [[k, list(np.shape(n.buffers[k]))] for k in sorted(n.buffers)],
            }
            for n in graph.nodes
        ],
    }


def serialize_graph(graph: NetworkGraph) -> bytes:
    desc = json.dumps(_describe(graph), sort_keys=True).encode("utf-8")
    parts = [INGR_MAGIC, struct.pack("<II", INGR_VERSION, len(desc)), desc]
    for n in graph.nodes:
        for k in sorted(n.params):
            parts.append(np.ascontiguousarray(n.params[k].data, dtype="<f4").tobytes())
        for k in sorted(n.buffers):
            parts.append(np.ascontiguousarray(n.buffers[k], dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_graph(data: bytes) -> NetworkGraph:
    if len(data) < 4 or data[:4] != INGR_MAGIC:
        raise BadMagicError("not an INGR container")
    if len(data) < 12:
        raise TruncatedError("INGR header is truncated")
    version, n_desc = struct.unpack_from("<II", data, 4)
    if version != INGR_VERSION:
        raise VersionError(f"unsupported INGR version {version}")
    pos = 12
    if len(data) < pos + n_desc:
        raise TruncatedError("INGR description is truncated")
    desc = json.loads(data[pos : pos + n_desc].decode("utf-8"))
    pos += n_desc

    def blob(shape):
        nonlocal pos
        count = int(np.prod(shape)) if shape else 1
        end = pos + 4 * count
        if end > len(data):
            raise TruncatedError("INGR parameter data is truncated")
        arr = np.frombuffer(data[pos:end], dtype="<f4").reshape(shape).astype(np.float64)
        pos = end
        return arr

    nodes = []
    for nd in desc["nodes"]:
        params = {k: ad.parameter(blob(tuple(s))) for k, s in nd["params"]}
        buffers = {k: blob(tuple(s)) for k, s in nd["buffers"]}
        nodes.append(Node(nd["name"], nd["kind"], tuple(nd["inputs"]), nd["attrs"], params, buffers))
    if pos != len(data):
        raise TruncatedError(f"{len(data) - pos} trailing bytes after INGR parameters")
    return NetworkGraph(desc["io"], desc["in_channels"], nodes, desc["output"], d=desc.get("d", 2))


def save_graph(graph: NetworkGraph, path) -> None:
    Path(path).write_bytes(serialize_graph(graph))


def load_graph(path) -> NetworkGraph:
    return deserialize_graph(Path(path).read_bytes())
