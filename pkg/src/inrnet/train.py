"""Training loops and metrics for INR classification, dense prediction and generation.

Every step draws a minibatch of records and a fresh low-discrepancy point
set (a new scramble per minibatch when enabled), evaluates the frozen INRs
on it, runs the network, and takes one AdamW step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import ConfigError, DivergenceError, GraphError
from .inr import InrRecord, evaluate_many
from .layers.graph import NetworkGraph, OutputInr, forward
from .pointset import Domain, PointSet, make_points

SAMPLERS = ("sobol", "qmc", "halton", "grid", "shrunk", "iid")
SCHEMES = ("qmc", "grid", "shrunk")
# scramble seeds used for evaluation sit far away from the training ones
_EVAL_SEED_OFFSET = 1_000_003


@dataclass
class TrainConfig:
    """Optimisation settings.

    ``weight_decay`` defaults to 0, so a step with zero gradient leaves the
    parameters untouched.
    """

    steps: int = 200
    batch: int = 16
    lr: float = 1e-2
    optimizer: str = "adamw"
    n_points: int = 1024
    sampler: str = "sobol"
    scramble: bool = True
    seed: int = 0
    weight_decay: float = 0.0
    noise_dim: int = 0  # generator input size; 0 means graph.in_channels

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.n_points < 16:
            raise ConfigError("n_points must be >= 16")
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r} (only adamw)")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}; expected one of {SAMPLERS}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


@dataclass
class Metrics:
    top1: float = float("nan")
    top_k: float = float("nan")
    k: int = 3
    miou: float = float("nan")
    pixel_accuracy: float = float("nan")
    loss_trace: list = field(default_factory=list)
    n_points: int = 0
    sampler: str = ""

    def row(self) -> dict:
        return {"n_points": self.n_points, "sampler": self.sampler, "top1": self.top1,
                f"top{self.k}": self.top_k, "miou": self.miou, "pixacc": self.pixel_accuracy}


# ----------------------------------------------------------------------------
# point sets and logging
# ----------------------------------------------------------------------------


def sample_points(sampler: str, n: int, seed: Optional[int], d: int = 2) -> PointSet:
    """Canonical-domain point set; grids use the nearest square (with a warning)."""
    sampler = "sobol" if sampler == "qmc" else sampler
    if sampler == "grid":
        side = max(1, round(n ** (1.0 / d)))
        if side ** d != n:
            warnings.warn(f"grid sampler: {n} is not a perfect power, using {side ** d} points")
    return make_points(sampler, d, n, Domain.cube(d), seed)


class _PointSource:
    """Per-step point sets; fixed sets are built once so their caches are reused."""

    def __init__(self, cfg: TrainConfig, d: int):
        self.cfg, self.d = cfg, d
        self._fixed: Optional[PointSet] = None

    def __call__(self, step: int) -> PointSet:
        cfg = self.cfg
        randomized = cfg.scramble and cfg.sampler in ("sobol", "qmc", "shrunk", "iid")
        if randomized:
            return sample_points(cfg.sampler, cfg.n_points, cfg.seed * 100_003 + step, self.d)
        if self._fixed is None:
            self._fixed = sample_points(cfg.sampler, cfg.n_points, cfg.seed, self.d)
        return self._fixed


class CsvLog:
    """``step,loss[,...]`` lines to an open text stream (or nowhere)."""

    def __init__(self, stream: Optional[TextIO], columns: Sequence[str] = ()):
        self.stream = stream
        self.columns = tuple(columns)
        if stream is not None:
            stream.write(",".join(("step", "loss") + self.columns) + "\n")

    def write(self, step: int, loss: float, *extra) -> None:
        if self.stream is not None:
            self.stream.write(",".join([str(step), repr(float(loss))] + [repr(float(e)) for e in extra]) + "\n")


def _batches(n: int, batch: int, rng: np.random.Generator):
    """Endless minibatches of record indices, reshuffled every epoch."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - min(batch, n) + 1, min(batch, n)):
            yield perm[i:i + batch]


def _check_finite(loss: Value, step: int) -> float:
    val = float(loss.item())
    if not math.isfinite(val):
        raise DivergenceError(f"loss became non-finite at step {step}")
    return val


# ----------------------------------------------------------------------------
# losses and metrics
# ----------------------------------------------------------------------------


def cross_entropy(logits: Value, labels: np.ndarray) -> Value:
    """Mean cross-entropy of (M, k) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(ad.log_softmax(logits, axis=-1) * onehot).sum() / max(len(labels), 1)


def top_k_accuracy(scores: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    """Fraction of rows whose label is among the ``k`` highest scores (ties count against)."""
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return float("nan")
    k = min(k, scores.shape[1])
    own = scores[np.arange(len(labels)), labels]
    higher = np.sum(scores > own[:, None], axis=1)
    return float(np.mean(higher < k))


def confusion(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    idx = np.asarray(truth, dtype=np.int64) * n_classes + np.asarray(pred, dtype=np.int64)
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def mean_iou(pred: np.ndarray, truth: np.ndarray, n_classes: Optional[int] = None) -> float:
    """IoU averaged over classes present in ``truth`` (pooled over all samples)."""
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    if truth.size == 0:
        return float("nan")
    n_classes = n_classes or int(max(pred.max(), truth.max())) + 1
    cm = confusion(pred, truth, n_classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = cm.sum(axis=1) > 0
    return float(np.mean(inter[present] / union[present]))


def pixel_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    return float(np.mean(pred == truth)) if truth.size else float("nan")


def energy_distance(real: Value, gen: Value, eps: float = 1e-8) -> Value:
    """Energy distance between two sets of sampled functions, (B, N, c) each.

    Each function is a vector of its values at the shared points, compared
    with the root-mean-square distance. The real-real term carries no
    gradient but is kept so the loss is zero when the sets coincide in law.
    """
    x = ad.as_value(real).detach()
    y = ad.as_value(gen)
    bx, by = x.shape[0], y.shape[0]
    xf = x.reshape(bx, 1, -1)
    yf = y.reshape(by, 1, -1)

    def rms(a: Value, b: Value) -> Value:
        diff = a - b.transpose(1, 0, 2)  # (Ba, Bb, F)
        return ((diff * diff).mean(axis=2) + eps).sqrt()

    cross = rms(yf, xf).mean()
    yy = rms(yf, yf)
    self_y = yy.sum() / max(by * (by - 1), 1) if by > 1 else yy.sum() * 0.0
    xd = x.data.reshape(bx, -1)
    pair = np.sqrt(((xd[:, None] - xd[None]) ** 2).mean(axis=2) + eps)
    self_x = pair.sum() / max(bx * (bx - 1), 1) if bx > 1 else 0.0
    # the diagonal of yy contributes sqrt(eps) each, remove it
    if by > 1:
        self_y = self_y - by * math.sqrt(eps) / (by * (by - 1))
    if bx > 1:
        self_x -= bx * math.sqrt(eps) / (bx * (bx - 1))
    return cross * 2.0 - self_y - float(self_x)


# ----------------------------------------------------------------------------
# training loops
# ----------------------------------------------------------------------------


def _require_io(graph: NetworkGraph, io: str):
    if graph.io != io:
        raise GraphError(f"expected a graph with io {io!r}, got {graph.io!r}")


def _models(records: Sequence[InrRecord], idx) -> list:
    return [records[i].model for i in idx]


def _optimizer(graph: NetworkGraph, cfg: TrainConfig) -> ad.AdamW:
    return ad.AdamW(graph.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_classifier(graph: NetworkGraph, dataset: Sequence[InrRecord], cfg: TrainConfig,
                     log: Optional[TextIO] = None):
    """Cross-entropy training of an INR -> vector graph; returns ``(graph, Metrics)``."""
    _require_io(graph, "inr->vector")
    if not dataset:
        raise ConfigError("empty dataset")
    if any(r.label is None for r in dataset):
        raise ConfigError("every record needs a class label")
    labels = np.array([r.label for r in dataset])
    rng = np.random.default_rng(cfg.seed)
    points = _PointSource(cfg, graph.d)
    batches = _batches(len(dataset), cfg.batch, rng)
    opt = _optimizer(graph, cfg)
    logger = CsvLog(log)
    trace = []
    graph.train()
    for step in range(cfg.steps):
        idx = next(batches)
        ps = points(step)
        opt.zero_grad()
        logits = forward(graph, _models(dataset, idx), ps)
        loss = cross_entropy(logits, labels[idx])
        val = _check_finite(loss, step)
        loss.backward()
        opt.step()
        trace.append(val)
        logger.write(step, val)
    graph.eval()
    return graph, Metrics(loss_trace=trace, n_points=cfg.n_points, sampler=cfg.sampler)


def _dense_loss(out: OutputInr, records: Sequence[InrRecord]) -> Value:
    total, count = None, 0
    for i, rec in enumerate(records):
        coords, lab = rec.dense_labels[:, :2], rec.dense_labels[:, 2].astype(np.int64)
        logits = out.lookup(coords, index=i)
        term = cross_entropy(logits, lab) * float(len(lab))
        total = term if total is None else total + term
        count += len(lab)
    return total / max(count, 1)


def train_dense(graph: NetworkGraph, dataset: Sequence[InrRecord], cfg: TrainConfig,
                log: Optional[TextIO] = None):
    """Per-point cross-entropy at labelled coordinates of an INR -> INR graph."""
    _require_io(graph, "inr->inr")
    if not dataset:
        raise ConfigError("empty dataset")
    for i, r in enumerate(dataset):
        if r.dense_labels is None:
            raise ConfigError(f"record {i} has no dense labels")
        if np.any(np.abs(r.dense_labels[:, :2]) > 1.0 + 1e-9):
            raise ConfigError(f"record {i}: labelled coordinate outside the domain")
    rng = np.random.default_rng(cfg.seed)
    points = _PointSource(cfg, graph.d)
    batches = _batches(len(dataset), cfg.batch, rng)
    opt = _optimizer(graph, cfg)
    logger = CsvLog(log)
    trace = []
    graph.train()
    for step in range(cfg.steps):
        idx = next(batches)
        ps = points(step)
        opt.zero_grad()
        out = forward(graph, _models(dataset, idx), ps)
        loss = _dense_loss(out, [dataset[i] for i in idx])
        val = _check_finite(loss, step)
        loss.backward()
        opt.step()
        trace.append(val)
        logger.write(step, val)
    graph.eval()
    return graph, Metrics(loss_trace=trace, n_points=cfg.n_points, sampler=cfg.sampler)


def train_generator(graph: NetworkGraph, dataset: Sequence[InrRecord], cfg: TrainConfig,
                    loss_plugin: Optional[Callable[[Value, Value], Value]] = None,
                    log: Optional[TextIO] = None):
    """Fit a vector -> INR generator so its samples match the dataset in law.

    ``loss_plugin(real, generated)`` receives (B, N, c) values at shared query
    points; :func:`energy_distance` is the reference choice.
    """
    if loss_plugin is None:
        raise ConfigError("train_generator needs a loss plugin, e.g. train.energy_distance")
    _require_io(graph, "vector->inr")
    if not dataset:
        raise ConfigError("empty dataset")
    nz = cfg.noise_dim or graph.in_channels
    rng = np.random.default_rng(cfg.seed)
    noise = np.random.default_rng(cfg.seed + 1)
    points = _PointSource(cfg, graph.d)
    batches = _batches(len(dataset), cfg.batch, rng)
    opt = _optimizer(graph, cfg)
    logger = CsvLog(log)
    trace = []
    graph.train()
    for step in range(cfg.steps):
        idx = next(batches)
        ps = points(step)
        opt.zero_grad()
        z = noise.standard_normal((len(idx), nz))
        gen = forward(graph, z, ps).values
        real = Value(evaluate_many(_models(dataset, idx), ps))
        loss = loss_plugin(real, gen)
        val = _check_finite(loss, step)
        if loss.requires_grad:
            loss.backward()
            opt.step()
        trace.append(val)
        logger.write(step, val)
    graph.eval()
    return graph, Metrics(loss_trace=trace, n_points=cfg.n_points, sampler=cfg.sampler)


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------


def predict_logits(graph: NetworkGraph, dataset: Sequence[InrRecord], ps: PointSet,
                   batch: int = 32) -> np.ndarray:
    """(R, k) logits of an INR -> vector graph at a fixed point set."""
    graph.eval()
    out = []
    with ad.no_grad():
        for i in range(0, len(dataset), batch):
            out.append(forward(graph, [r.model for r in dataset[i:i + batch]], ps).data)
    return np.concatenate(out) if out else np.zeros((0, graph.out_channels))


def evaluate_metrics(graph: NetworkGraph, dataset: Sequence[InrRecord], cfg: TrainConfig,
                     n_points: Optional[int] = None, sampler: Optional[str] = None, k: int = 3,
                     seed: Optional[int] = None) -> Metrics:
    """Top-1/top-k (classification) or PixAcc/mIoU (dense) at ``n_points`` samples."""
    n = n_points or cfg.n_points
    sampler = sampler or cfg.sampler
    seed = cfg.seed + _EVAL_SEED_OFFSET if seed is None else seed
    ps = sample_points(sampler, n, seed, graph.d)
    m = Metrics(k=k, n_points=ps.n, sampler=sampler)
    if graph.io == "inr->vector":
        logits = predict_logits(graph, dataset, ps)
        labels = np.array([r.label for r in dataset])
        m.top1 = top_k_accuracy(logits, labels, 1)
        m.top_k = top_k_accuracy(logits, labels, k)
    elif graph.io == "inr->inr":
        graph.eval()
        preds, truth = [], []
        with ad.no_grad():
            for i in range(0, len(dataset), 32):
                chunk = dataset[i:i + 32]
                out = forward(graph, [r.model for r in chunk], ps)
                for j, rec in enumerate(chunk):
                    preds.append(out(rec.dense_labels[:, :2], index=j).argmax(axis=-1))
                    truth.append(rec.dense_labels[:, 2].astype(np.int64))
        pred, tru = np.concatenate(preds), np.concatenate(truth)
        m.pixel_accuracy = pixel_accuracy(pred, tru)
        m.miou = mean_iou(pred, tru, graph.out_channels)
    else:
        raise GraphError(f"no metrics defined for io {graph.io!r}")
    return m


@dataclass
class SchemeTable:
    """Accuracy with rows = training scheme and columns = evaluation scheme."""

    schemes: tuple
    values: np.ndarray  # (S, S), median over seeds
    per_seed: np.ndarray  # (seeds, S, S)

    def diagonal_ok(self) -> np.ndarray:
        """Each diagonal entry is at least the minimum of its row."""
        return np.diag(self.values) >= self.values.min(axis=1)

    def csv(self) -> str:
        lines = ["train\\eval," + ",".join(self.schemes)]
        for s, row in zip(self.schemes, self.values):
            lines.append(s + "," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def sampling_scheme_experiment(graph_factory: Callable[[int], NetworkGraph], dataset: Sequence[InrRecord],
                               cfg: TrainConfig, test: Optional[Sequence[InrRecord]] = None,
                               schemes: Sequence[str] = SCHEMES, seeds: Sequence[int] = (0,)) -> SchemeTable:
    """Train one classifier per sampling scheme and evaluate it under every scheme."""
    test = dataset if test is None else test
    schemes = tuple(schemes)
    out = np.zeros((len(seeds), len(schemes), len(schemes)))
    for si, seed in enumerate(seeds):
        for i, train_scheme in enumerate(schemes):
            tcfg = TrainConfig(**{**cfg.__dict__, "sampler": train_scheme, "seed": seed})
            graph, _ = train_classifier(graph_factory(seed), dataset, tcfg)
            for j, eval_scheme in enumerate(schemes):
                out[si, i, j] = evaluate_metrics(graph, test, tcfg, sampler=eval_scheme, k=1).top1
    return SchemeTable(schemes, np.median(out, axis=0), out)
