"""Image IO, on-disk INR datasets and small synthetic corpora.

Images are binary 8-bit PGM (P5, grayscale) or PPM (P6, colour). A dataset
store is a directory holding one INR file per record and a manifest with one
line per record::

    <inr-file-path>\\t<label | @dense-file-path>

Dense label files hold lines ``x y label_id``.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import inr as _inr
from .errors import FormatError
from .inr import InrModel, InrRecord

MANIFEST = "manifest.tsv"

# ----------------------------------------------------------------------------
# PGM / PPM
# ----------------------------------------------------------------------------


def _header_tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated header tokens and the offset after them."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated image header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1  # one whitespace byte ends the header


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM into floats in [0, 1]; (H, W) or (H, W, 3)."""
    data = Path(path).read_bytes()
    tokens, pos = _header_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise FormatError(f"{path}: only 8-bit images are supported")
    c = 1 if magic == b"P5" else 3
    raw = data[pos:pos + w * h * c]
    if len(raw) != w * h * c:
        raise FormatError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c).astype(np.float32) / 255.0
    return img[:, :, 0] if c == 1 else img


def write_pnm(path, image: np.ndarray) -> None:
    """Write floats in [0, 1] as PGM (2-D input) or PPM (H, W, 3)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot store an image of shape {img.shape}")
    h, w = img.shape[:2]
    pix = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


# ----------------------------------------------------------------------------
# dataset store
# ----------------------------------------------------------------------------


def read_dense_labels(path) -> np.ndarray:
    rows = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if rows.size and rows.shape[1] != 3:
        raise FormatError(f"{path}: dense label lines must be 'x y label_id'")
    return rows.reshape(-1, 3)


def write_dense_labels(path, labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, lab in np.asarray(labels):
            fh.write(f"{float(x)!r} {float(y)!r} {int(lab)}\n")


@dataclass
class DatasetStore:
    """Directory of content-addressed INR files plus a manifest."""

    root: Path
    entries: list = field(default_factory=list)  # [(inr path, label or "@dense path")]

    @classmethod
    def create(cls, root) -> "DatasetStore":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        store = cls(root)
        store.write_manifest()
        return store

    @classmethod
    def open(cls, root) -> "DatasetStore":
        root = Path(root)
        path = root / MANIFEST
        if not path.exists():
            raise FormatError(f"{root}: no {MANIFEST}")
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected '<inr path>\\t<label>'")
            inr_path, tag = parts
            if not (root / inr_path).exists():
                raise FormatError(f"{path}:{lineno}: {inr_path} does not exist")
            entries.append((inr_path, tag))
        return cls(root, entries)

    def __len__(self) -> int:
        return len(self.entries)

    def write_manifest(self) -> None:
        lines = [f"{p}\t{t}\n" for p, t in self.entries]
        (self.root / MANIFEST).write_text("".join(lines), encoding="utf-8")

    def add(self, model: InrModel, label: Optional[int] = None, dense_labels: Optional[np.ndarray] = None,
            source_id: str = "") -> str:
        """Store a model under the hash of its bytes and append a manifest line."""
        blob = _inr.serialize(model)
        name = hashlib.sha1(blob).hexdigest()[:16] + ".inr"
        (self.root / name).write_bytes(blob)
        if dense_labels is not None:
            dense_name = Path(name).stem + ".labels"
            write_dense_labels(self.root / dense_name, dense_labels)
            tag = "@" + dense_name
        else:
            tag = "" if label is None else str(int(label))
        self.entries.append((name, tag))
        self.write_manifest()
        return name

    def records(self) -> list:
        """Load every record; dense coordinates outside the model domain are rejected."""
        out = []
        for i, (p, tag) in enumerate(self.entries):
            model = _inr.load(self.root / p)
            label, dense = None, None
            if tag.startswith("@"):
                dense = read_dense_labels(self.root / tag[1:])
                check_dense_labels(dense, i)
            elif tag:
                label = int(tag)
            out.append(InrRecord(model, label, dense, source_id=p))
        return out


def check_dense_labels(dense: np.ndarray, index: int) -> None:
    """Dense coordinates are canonical ``[-1, 1]^2`` points."""
    coords = dense[:, :2]
    if np.any(np.abs(coords) > 1.0 + 1e-9):
        raise FormatError(f"record {index}: labelled coordinate outside the domain")


def read_label_table(path) -> dict:
    """``labels.tsv``: ``<image file name>\\t<label>`` lines."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            name, lab = line.split("\t")
            out[name.strip()] = lab.strip()
    return out


# ----------------------------------------------------------------------------
# synthetic corpora
# ----------------------------------------------------------------------------


def shape_image(kind: str, size: int, centre, radius: float, supersample: int = 4) -> np.ndarray:
    """Anti-aliased filled disk or axis-aligned square on [-1, 1]^2 (values in [0, 1])."""
    s = size * supersample
    t = (np.arange(s) + 0.5) / s * 2.0 - 1.0
    x, y = np.meshgrid(t, t, indexing="xy")
    dx, dy = x - centre[0], y - centre[1]
    if kind == "disk":
        inside = dx * dx + dy * dy <= radius * radius
    elif kind == "square":
        inside = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3)).astype(np.float32)


def shape_images(n: int, size: int = 16, seed: int = 0):
    """Balanced disk (label 0) / square (label 1) images with random position and size."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(n):
        kind = i % 2
        radius = rng.uniform(0.35, 0.6)
        centre = rng.uniform(-0.9 + radius, 0.9 - radius, size=2)
        images.append(shape_image(("disk", "square")[kind], size, centre, radius))
        labels.append(kind)
    return images, np.asarray(labels)


def shape_corpus(n: int = 200, size: int = 16, seed: int = 0, widths: Sequence[int] = (32, 32),
                 steps: int = 300, lr: float = 1e-3) -> list:
    """Disk-vs-square INR records; returns ``[InrRecord]`` with class labels."""
    images, labels = shape_images(n, size, seed)
    fits = _inr.fit_inrs(images, _inr.ArchConfig("siren", tuple(widths)), steps=steps, lr=lr, seed=seed)
    return [InrRecord(m, int(lab), source_id=f"shape{i}") for i, ((m, _), lab) in enumerate(zip(fits, labels))]


def threshold_labels(model, n_coords: int, seed: int, threshold: float = 0.0) -> np.ndarray:
    """Dense labels ``[x, y, f(x) > threshold]`` at uniform random coordinates."""
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-1.0, 1.0, size=(n_coords, 2))
    vals = np.asarray(model(coords))[:, 0]
    return np.column_stack([coords, (vals > threshold).astype(np.float64)])


def cache_dir() -> Path:
    return Path(os.environ.get("INRNET_CACHE", Path.home() / ".cache" / "inrnet"))


def constant_model(value: float, d: int = 2, channels: int = 1) -> InrModel:
    """SIREN whose canonical output is ``value`` everywhere (zero weights, output bias)."""
    m = _inr.siren_init((4,), seed=0, d=d, out_channels=channels)
    m.weights = [(np.zeros_like(w), np.zeros_like(b)) for w, b in m.weights]
    w_last, _ = m.weights[-1]
    m.weights[-1] = (w_last, np.full(channels, value, dtype=np.float32))
    return m


def constant_corpus(values: Sequence[float], labels: Optional[Sequence[int]] = None) -> list:
    labels = [None] * len(values) if labels is None else labels
    return [InrRecord(constant_model(v), lab, source_id=f"const{i}")
            for i, (v, lab) in enumerate(zip(values, labels))]


def pink_noise_image(size: int = 32, seed: int = 0) -> np.ndarray:
    """Grayscale image with a 1/f amplitude spectrum (natural-image statistics), in [0, 1]."""
    rng = np.random.default_rng(seed)
    f = np.fft.fftfreq(size)
    radius = np.hypot(f[:, None], f[None, :])
    radius[0, 0] = 1.0
    img = np.real(np.fft.ifft2(np.fft.fft2(rng.normal(size=(size, size))) / radius))
    return ((img - img.min()) / (img.max() - img.min())).astype(np.float32)


def natural_image(size: int = 32) -> np.ndarray:
    """Area-downsampled ``camera`` photograph when scikit-image is installed, else pink noise."""
    try:
        from skimage import data as skdata
    except ImportError:
        return pink_noise_image(size)
    cam = skdata.camera().astype(np.float64) / 255.0
    h = cam.shape[0] // size * size
    cam = cam[:h, :h].reshape(size, h // size, size, h // size).mean(axis=(1, 3))
    return cam.astype(np.float32)
