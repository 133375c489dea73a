"""Random configurations of every layer for tape-versus-finite-difference checks.

Each case builds a scalar function of (input values, layer parameters) on a
small scrambled Sobol set. Inputs are spread out so that the finite
difference step never crosses a relu kink or changes a window maximum; the
checks then compare the fp32 tape gradient against fp64 central differences.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Value
from ..pointset import Domain, sobol_sequence
from . import basis as _basis
from . import pointwise as _pw
from .conv import avg_pool, conv_binned, conv_forward, max_pool, window_support
from .kernels import GaussianKernel, KernelSpline, MlpKernel, Support, VoronoiBins

EPSILON = 1e-3


def _spread_values(rng, shape, gap: float = 0.02) -> np.ndarray:
    """Distinct values at least ``gap`` apart and away from zero."""
    n = int(np.prod(shape))
    mags = (np.arange(n) + 1) * gap
    vals = mags * rng.choice([-1.0, 1.0], size=n)
    return rng.permutation(vals).reshape(shape) / (n * gap) * 2.0


def _points(rng, n=None):
    n = n or int(rng.integers(40, 90))
    return sobol_sequence(2, n, int(rng.integers(1 << 30)), Domain.cube(2))


def _projector(rng, shape):
    return rng.normal(size=shape)


def _case_conv(rng, kind: str):
    ps = _points(rng)
    ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    pitch = float(rng.uniform(0.2, 0.35))
    padding = str(rng.choice(["zero", "reflect", "none"]))
    stride = int(rng.integers(0, 2))
    x0 = _spread_values(rng, (ps.n, ci))
    sup = Support.for_taps((3, 3), (pitch, pitch), (1, 1))
    if kind == "spline":
        k = int(rng.choice([2, 3, 4]))
        ker0 = KernelSpline(k, ci, co, pitch, seed=int(rng.integers(1 << 30)))
        sup = ker0.support
        theta0 = [ker0.control.data]

        def make(theta):
            return KernelSpline(k, ci, co, pitch, control=theta[0])
    elif kind == "mlp":
        ker0 = MlpKernel(ci, co, pitch, sup, hidden=(6,), seed=int(rng.integers(1 << 30)))
        theta0 = [w.data for w in ker0.weights]

        def make(theta):
            return MlpKernel(ci, co, pitch, sup, hidden=(6,), weights=list(theta))
    else:
        ker0 = GaussianKernel(ci, co, pitch, sup, width=float(rng.uniform(0.7, 1.5)),
                              seed=int(rng.integers(1 << 30)))
        theta0 = [ker0.amplitude.data]

        def make(theta):
            return GaussianKernel(ci, co, pitch, sup, width=ker0.width, amplitude=theta[0])
    bias0 = rng.normal(size=co)
    if padding == "reflect":
        stride = 0
    binned = kind == "gauss" and rng.random() < 0.5
    bins = VoronoiBins.sobol(sup, 16) if binned else None
    with ad.no_grad():
        ker_probe = make([Value(t) for t in theta0])
        if binned:
            probe, _ = conv_binned(Value(x0), ps, ker_probe, bins, None, padding, stride)
        else:
            probe, _ = conv_forward(Value(x0), ps, ker_probe, None, padding, stride)
    proj = _projector(rng, probe.shape)

    def fn(x, b, *theta):
        ker = make(theta)
        if binned:
            out, _ = conv_binned(x, ps, ker, bins, b, padding, stride)
        else:
            out, _ = conv_forward(x, ps, ker, b, padding, stride)
        return (out * proj).sum()

    params = [ad.parameter(x0), ad.parameter(bias0)] + [ad.parameter(t) for t in theta0]
    exclude = None
    if kind == "mlp":
        exclude = _mlp_kinks(ps, sup, pitch, padding, stride)
    return fn, params, exclude


def _mlp_kinks(ps, sup, pitch, padding, stride):
    """Skip first-layer weights of hidden units that sit near a kink at some offset."""
    from .geometry import neighborhood

    nb = neighborhood(ps, sup, padding, stride)
    u = nb.offsets / pitch

    def exclude(x, b, w0, b0, w1, b1):
        pre = u @ w0.data + b0.data
        reach = EPSILON * (np.abs(u).sum(axis=1, keepdims=True) + 1.0) * 2.0
        near = np.any(np.abs(pre) < reach, axis=0)
        mw0 = np.broadcast_to(near[None, :], w0.shape).copy()
        masks = [np.zeros(x.shape, bool), np.zeros(b.shape, bool), mw0, near.copy(),
                 np.zeros(w1.shape, bool), np.zeros(b1.shape, bool)]
        return masks

    return exclude


def _case_pool(rng, kind: str):
    ps = _points(rng)
    c = int(rng.integers(1, 3))
    pitch = float(rng.uniform(0.2, 0.4))
    k = int(rng.choice([2, 3]))
    win = window_support(k, pitch)
    stride = int(rng.integers(0, 2))
    x0 = _spread_values(rng, (ps.n, c), gap=0.05)
    calibrate = bool(rng.random() < 0.5)
    padding = str(rng.choice(["zero", "none"]))
    with ad.no_grad():
        if kind == "max":
            probe, _ = max_pool(Value(x0), ps, win, stride, calibrate, 1.0, padding)
        else:
            probe, _ = avg_pool(Value(x0), ps, win, stride, padding)
    proj = _projector(rng, probe.shape)

    def fn(x):
        if kind == "max":
            out, _ = max_pool(x, ps, win, stride, calibrate, 1.0, padding)
        else:
            out, _ = avg_pool(x, ps, win, stride, padding)
        return (out * proj).sum()

    return fn, [ad.parameter(x0)], None


def _case_linear(rng):
    ps = _points(rng)
    ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    normalized = bool(rng.random() < 0.5)
    proj = _projector(rng, (ps.n, co))

    def fn(x, w, b):
        return (_pw.linear_combination(x, w, b, normalized) * proj).sum()

    return fn, [ad.parameter(rng.normal(size=(ps.n, ci))), ad.parameter(rng.normal(size=(ci, co))),
                ad.parameter(rng.normal(size=co))], None


def _case_norm(rng):
    ps = _points(rng)
    c = int(rng.integers(1, 4))
    batch = int(rng.integers(1, 3))
    mode = str(rng.choice(["instance", "batch"]))
    proj = _projector(rng, (batch, ps.n, c))

    def fn(x, scale, shift):
        state = _pw.NormState(c) if mode == "batch" else None
        return (_pw.normalize(x, ps, mode, scale, shift, state, True) * proj).sum()

    return fn, [ad.parameter(rng.normal(size=(batch, ps.n, c)) + 0.5), ad.parameter(rng.normal(size=c)),
                ad.parameter(rng.normal(size=c))], None


def _case_relu(rng):
    ps = _points(rng)
    c = int(rng.integers(1, 4))
    proj = _projector(rng, (ps.n, c))
    return (lambda x: (x.relu() * proj).sum()), [ad.parameter(_spread_values(rng, (ps.n, c)))], None


def _case_posenc(rng):
    ps = _points(rng)
    c = int(rng.integers(1, 3))
    nf = int(rng.integers(1, 4))
    proj = _projector(rng, (ps.n, c + 2 * nf * 2))
    return (lambda x: (_pw.positional_encoding(x, ps, nf) * proj).sum()), \
        [ad.parameter(rng.normal(size=(ps.n, c)))], None


def _case_global_pool(rng):
    ps = _points(rng)
    c = int(rng.integers(1, 4))
    proj = _projector(rng, (1, c))
    return (lambda x: (_pw.global_pool(x, ps) * proj).sum()), [ad.parameter(rng.normal(size=(1, ps.n, c)))], None


def _case_resample(rng):
    ps = _points(rng, 64)
    c = int(rng.integers(1, 3))
    proj = _projector(rng, (1, ps.n, c))

    def fn(x):
        v, q = _pw.downsample(x, ps, 1)
        up, _ = _pw.upsample(v, q, 1)
        return (up * proj).sum()

    return fn, [ad.parameter(rng.normal(size=(1, ps.n, c)))], None


def _case_legendre(rng):
    ps = _points(rng)
    c = int(rng.integers(1, 3))
    deg = int(rng.integers(0, 4))
    bas = _basis.LegendreBasis(ps.domain, deg)
    proj_p = _projector(rng, (1, len(bas) * c))
    proj_e = _projector(rng, (1, ps.n, c))

    def fn(x, coefs):
        a = (_basis.legendre_project(x, ps, bas) * proj_p).sum()
        b = (_basis.legendre_expand(coefs, ps, bas, c) * proj_e).sum()
        return a + b

    return fn, [ad.parameter(rng.normal(size=(1, ps.n, c))), ad.parameter(rng.normal(size=(1, len(bas) * c)))], None


def _case_adaptive(rng):
    ps = _points(rng, 96)
    c = int(rng.integers(1, 3))
    deg = int(rng.integers(0, 2))
    regions = _basis.grid_regions(ps.domain, (2, 2))
    with ad.no_grad():
        probe = _basis.embed(_basis.tokenize(Value(np.zeros((1, ps.n, c))), ps, regions), ps, regions, deg)
    proj = _projector(rng, probe.shape)

    def fn(x):
        return (_basis.embed(_basis.tokenize(x, ps, regions), ps, regions, deg) * proj).sum()

    return fn, [ad.parameter(rng.normal(size=(1, ps.n, c)))], None


def _case_dense(rng):
    b, ni, no = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    proj = _projector(rng, (b, no))
    return (lambda x, w, bb: ((ad.matmul(x, w) + bb) * proj).sum()), \
        [ad.parameter(rng.normal(size=(b, ni))), ad.parameter(rng.normal(size=(ni, no))),
         ad.parameter(rng.normal(size=no))], None


LAYER_CASES: dict = {
    "conv": lambda rng: _case_conv(rng, "spline"),
    "conv_mlp": lambda rng: _case_conv(rng, "mlp"),
    "conv_gauss": lambda rng: _case_conv(rng, "gauss"),
    "linear": _case_linear,
    "norm": _case_norm,
    "relu": _case_relu,
    "maxpool": lambda rng: _case_pool(rng, "max"),
    "avgpool": lambda rng: _case_pool(rng, "avg"),
    "posenc": _case_posenc,
    "global_pool": _case_global_pool,
    "resample": _case_resample,
    "legendre": _case_legendre,
    "adaptive_pool": _case_adaptive,
    "dense": _case_dense,
}


def check_layer(name: str, seed: int, epsilon: float = EPSILON) -> float:
    """Max relative error of the fp32 tape gradient for one random configuration."""
    rng = np.random.default_rng(seed)
    fn, params, exclude = LAYER_CASES[name](rng)
    with ad.precision(np.float32):
        params = [Value(p.data, requires_grad=True, dtype=np.float32) for p in params]
        return ad.finite_diff_check(fn, params, epsilon=epsilon, exclude=exclude)


def check_all(names=None, n_configs: int = 10, seed: int = 0) -> list:
    """Rows ``(layer, config, max_relative_error)``."""
    rows = []
    for name in names or LAYER_CASES:
        for i in range(n_configs):
            rows.append((name, i, check_layer(name, seed * 1000 + i)))
    return rows
