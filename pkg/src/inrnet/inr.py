"""Coordinate networks (SIREN, Gaussian Fourier features) used as data.

Downstream code treats an INR as a black box: :func:`evaluate` on a
:class:`~inrnet.pointset.PointSet` is the only access path. Both
architectures are exposed under one convention at that boundary: coordinates
on ``[-1, 1]^d`` and outputs in ``[-1, 1]``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import BadMagicError, DivergenceError, DomainMismatchError, TruncatedError, VersionError
from .pointset import Domain, PointSet, grid_points

MAGIC = b"INRN"
VERSION = 1
_ARCH_CODES = {"siren": 0, "fourier": 1}
_RANGE_CODES = {"sym": 0, "unit": 1}


@dataclass
class InrModel:
    arch: str
    domain: Domain
    out_channels: int
    weights: list  # [(W (in, out), b (out,)), ...] float32
    omega0: float = 30.0
    sigma: float = 0.0
    fourier_matrix: Optional[np.ndarray] = None  # (n_features, d)
    output_range: str = "sym"

    @property
    def layer_widths(self) -> list:
        return [w.shape[1] for w, _ in self.weights[:-1]]

    @property
    def d(self) -> int:
        return self.domain.d

    def signature(self) -> tuple:
        return (self.arch, self.domain, self.out_channels, self.output_range,
                tuple(w.shape for w, _ in self.weights),
                None if self.fourier_matrix is None else self.fourier_matrix.shape)

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        """Canonical-convention values at raw canonical coordinates (N, d)."""
        ps = PointSet(Domain.cube(self.d), coords)
        return evaluate(self, ps).data


@dataclass
class InrRecord:
    model: InrModel
    label: Optional[int] = None
    dense_labels: Optional[np.ndarray] = None  # (K, d + 1): coordinates then label
    source_id: str = ""

    def __post_init__(self):
        if self.label is not None and self.dense_labels is not None:
            raise ValueError("a record carries either a class label or dense labels, not both")


@dataclass
class ArchConfig:
    arch: str = "siren"
    widths: tuple = (128, 128, 128)
    omega0: float = 30.0
    sigma: float = 10.0
    n_features: int = 64


# ----------------------------------------------------------------------------
# initialisation
# ----------------------------------------------------------------------------


def siren_init(widths: Sequence[int], omega0: float = 30.0, seed: int = 0, d: int = 2,
               out_channels: int = 1) -> InrModel:
    """SIREN with the usual uniform initialisation.

    First layer ``U(-1/d, 1/d)``; later layers ``U(+-sqrt(6/fan_in)/omega0)``,
    biases drawn from the same range as their layer's weights.
    """
    if not widths:
        raise ValueError("widths must be nonempty")
    if omega0 <= 0:
        raise ValueError("omega0 must be positive")
    rng = np.random.default_rng(seed)
    dims = [d, *widths, out_channels]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / fan_in if i == 0 else np.sqrt(6.0 / fan_in) / omega0
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        b = rng.uniform(-bound, bound, size=fan_out).astype(np.float32)
        layers.append((w, b))
    return InrModel("siren", Domain.cube(d, -1.0, 1.0), out_channels, layers, omega0=float(omega0),
                    output_range="sym")


def fourier_init(widths: Sequence[int], sigma: float = 10.0, n_features: int = 64, seed: int = 0,
                 d: int = 2, out_channels: int = 1) -> InrModel:
    """Gaussian Fourier-feature MLP on ``[0, 1]^d`` with outputs in ``[0, 1]``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    bmat = (rng.standard_normal((n_features, d)) * sigma).astype(np.float32)
    dims = [2 * n_features, *widths, out_channels]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in) if fan_out != out_channels else np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        b = np.zeros(fan_out, dtype=np.float32)
        layers.append((w, b))
    return InrModel("fourier", Domain.cube(d, 0.0, 1.0), out_channels, layers, sigma=float(sigma),
                    fourier_matrix=bmat, output_range="unit")


def init_model(cfg: ArchConfig, seed: int, d: int = 2, out_channels: int = 1) -> InrModel:
    if cfg.arch == "siren":
        return siren_init(cfg.widths, cfg.omega0, seed, d, out_channels)
    if cfg.arch == "fourier":
        return fourier_init(cfg.widths, cfg.sigma, cfg.n_features, seed, d, out_channels)
    raise ValueError(f"unknown INR architecture {cfg.arch!r}")


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------


def _native_coords(m: InrModel, ps: PointSet) -> np.ndarray:
    if ps.domain == m.domain:
        return ps.points
    if ps.domain.d == m.d and ps.domain.is_cube(-1.0, 1.0):
        return m.domain.from_unit((ps.points + 1.0) / 2.0)
    raise DomainMismatchError(f"point set domain {ps.domain.bounds} does not match model domain")


def _forward(arch: str, x, layers, omega0: float, bmat):
    """Shared forward for single (N, d) or stacked (B, N, d) parameters."""
    if arch == "fourier":
        proj = ad.matmul(x, bmat.swap_last()).scale(2 * np.pi)
        h = ad.concat([proj.cos(), proj.sin()], axis=-1)
        for w, b in layers[:-1]:
            h = (ad.matmul(h, w) + b).relu()
    else:
        h = x
        for w, b in layers[:-1]:
            h = (ad.matmul(h, w) + b).scale(omega0).sin()
    w, b = layers[-1]
    return ad.matmul(h, w) + b


def _to_canonical(out, output_range: str):
    return out.scale(2.0) - 1.0 if output_range == "unit" else out


def evaluate(m: InrModel, ps: PointSet, native: bool = False) -> Value:
    """Model outputs at the ordered points as an (N, c) value without gradient."""
    x = _native_coords(m, ps)
    with ad.no_grad():
        layers = [(Value(w), Value(b)) for w, b in m.weights]
        bmat = None if m.fourier_matrix is None else Value(m.fourier_matrix)
        out = _forward(m.arch, Value(x), layers, m.omega0, bmat)
        return out if native else _to_canonical(out, m.output_range)


def evaluate_many(models: Sequence[InrModel], ps: PointSet) -> np.ndarray:
    """Stack of canonical outputs, shape (B, N, c); same-shaped models run batched."""
    out = [None] * len(models)
    groups: dict = {}
    for i, m in enumerate(models):
        groups.setdefault(m.signature(), []).append(i)
    for idx in groups.values():
        ms = [models[i] for i in idx]
        m0 = ms[0]
        x = _native_coords(m0, ps)
        with ad.no_grad():
            layers = [
                (Value(np.stack([m.weights[k][0] for m in ms])),
                 Value(np.stack([m.weights[k][1] for m in ms])[:, None, :]))
                for k in range(len(m0.weights))
            ]
            bmat = None
            if m0.fourier_matrix is not None:
                bmat = Value(np.stack([m.fourier_matrix for m in ms]))
            vals = _to_canonical(_forward(m0.arch, Value(x), layers, m0.omega0, bmat), m0.output_range)
        for j, i in enumerate(idx):
            out[i] = vals.data[j]
    return np.stack(out)


# ----------------------------------------------------------------------------
# fitting
# ----------------------------------------------------------------------------


def image_grid(h: int, w: int, domain: Domain) -> PointSet:
    """Pixel centres of an H x W image; x runs along columns, y along rows."""
    return grid_points([w, h], domain)


def image_targets(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    return img.reshape(h * w, c)


def fit_inrs(images: Sequence[np.ndarray], arch: Optional[ArchConfig] = None, steps: int = 2000,
             lr: float = 1e-4, seed: int = 0, log_every: int = 0):
    """Fit one INR per image, all optimised together as a stacked batch.

    Images are H x W (x c) arrays with values in [0, 1]. Image ``i`` uses
    seed ``seed + i``. Returns ``[(model, final_mse), ...]`` where the MSE is
    measured in [0, 1] pixel units.
    """
    arch = arch or ArchConfig()
    if steps < 1:
        raise ValueError("steps must be >= 1")
    imgs = [np.asarray(im, dtype=np.float32) for im in images]
    if not imgs:
        return []
    shape = imgs[0].shape
    if any(im.shape != shape for im in imgs):
        raise ValueError("batched fitting needs images of one shape")
    if np.any([(im.min() < 0) or (im.max() > 1) for im in imgs]):
        raise ValueError("image values must lie in [0, 1]")
    h, w = shape[:2]
    c = 1 if len(shape) == 2 else shape[2]
    models = [init_model(arch, seed + i, 2, c) for i in range(len(imgs))]
    m0 = models[0]
    coords = image_grid(h, w, m0.domain).points.astype(np.float32)
    target = np.stack([image_targets(im) for im in imgs])
    native = 2.0 * target - 1.0 if m0.output_range == "sym" else target
    unit_scale = 0.25 if m0.output_range == "sym" else 1.0

    params = []
    layers = []
    for k in range(len(m0.weights)):
        wk = ad.parameter(np.stack([m.weights[k][0] for m in models]))
        bk = ad.parameter(np.stack([m.weights[k][1] for m in models])[:, None, :])
        layers.append((wk, bk))
        params += [wk, bk]
    bmat = None
    if m0.fourier_matrix is not None:
        bmat = Value(np.stack([m.fourier_matrix for m in models]))
    opt = ad.AdamW(params, lr=lr, weight_decay=0.0)
    x = Value(coords)
    tgt = Value(native)
    per_model = None
    for step in range(steps):
        opt.zero_grad()
        pred = _forward(m0.arch, x, layers, m0.omega0, bmat)
        err = pred - tgt
        sq = (err * err).mean(axis=(1, 2))
        loss = sq.sum()
        per_model = sq.data.copy()
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"loss became non-finite at step {step}: per-model {per_model}")
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            print(f"fit step {step} mean mse {per_model.mean() * unit_scale:.3e}")
    # final error measured after the last update
    with ad.no_grad():
        pred = _forward(m0.arch, x, layers, m0.omega0, bmat)
        final = (((pred.data - native) ** 2).mean(axis=(1, 2))) * unit_scale
    out = []
    for i, m in enumerate(models):
        m.weights = [(wk.data[i].copy(), bk.data[i, 0].copy()) for wk, bk in layers]
        out.append((m, float(final[i])))
    return out


def fit_inr(image: np.ndarray, arch_config: Optional[ArchConfig] = None, steps: int = 2000,
            lr: float = 1e-4, seed: int = 0):
    """Fit a single INR; returns ``(model, final_mse)``."""
    return fit_inrs([image], arch_config, steps, lr, seed)[0]


# ----------------------------------------------------------------------------
# binary format
# ----------------------------------------------------------------------------


def serialize(m: InrModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<BBBB", _ARCH_CODES[m.arch], m.d, m.out_channels, len(m.weights)))
    for w, _ in m.weights:
        buf.write(struct.pack("<II", *w.shape))
    for w, b in m.weights:
        buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    if m.arch == "siren":
        buf.write(struct.pack("<f", m.omega0))
    else:
        buf.write(struct.pack("<f", m.sigma))
        buf.write(np.ascontiguousarray(m.fourier_matrix, dtype="<f4").tobytes())
    for lo, hi in m.domain.bounds:
        buf.write(struct.pack("<ff", lo, hi))
    buf.write(struct.pack("<B", _RANGE_CODES[m.output_range]))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"payload truncated at byte {self.pos} (need {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def deserialize(data: bytes) -> InrModel:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not an INR file (bad magic)")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"unsupported INR format version {version}")
    arch_code, d, c, n_layers = r.unpack("<BBBB")
    arch = {v: k for k, v in _ARCH_CODES.items()}.get(arch_code)
    if arch is None:
        raise BadMagicError(f"unknown architecture code {arch_code}")
    shapes = [r.unpack("<II") for _ in range(n_layers)]
    layers = [(r.array(s), r.array((s[1],))) for s in shapes]
    omega0, sigma, bmat = 30.0, 0.0, None
    if arch == "siren":
        (omega0,) = r.unpack("<f")
    else:
        (sigma,) = r.unpack("<f")
        bmat = r.array((shapes[0][0] // 2, d))
    bounds = [r.unpack("<ff") for _ in range(d)]
    (rng_code,) = r.unpack("<B")
    out_range = {v: k for k, v in _RANGE_CODES.items()}[rng_code]
    return InrModel(arch, Domain(tuple(bounds)), c, layers, omega0=float(omega0), sigma=float(sigma),
                    fourier_matrix=bmat, output_range=out_range)


def save(m: InrModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(m))


def load(path) -> InrModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
