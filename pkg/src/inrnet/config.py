"""Strict ``key = value`` run configuration.

Keys are grouped by prefix: ``train.`` (optimisation), ``points.`` (sample
sets) and ``net.`` (network preset). Unknown keys, malformed values and
missing required keys are all configuration errors naming the key.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .layers.graph import GraphBuilder, NetworkGraph
from .layers.basis import LegendreBasis
from .pointset import Domain
from .train import TrainConfig

REQUIRED = object()


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
SCHEMA = {
    "train.steps": (int, REQUIRED),
    "train.lr": (float, REQUIRED),
    "train.batch": (int, 16),
    "train.optimizer": (str, "adamw"),
    "train.seed": (int, 0),
    "train.weight_decay": (float, 0.0),
    "train.noise_dim": (int, 0),
    "points.n": (int, REQUIRED),
    "points.sampler": (str, "sobol"),
    "points.scramble": (_bool, True),
    "net.io": (str, REQUIRED),
    "net.arch": (str, REQUIRED),
    "net.in_channels": (int, 1),
    "net.classes": (int, 2),
    "net.width": (int, 8),
    "net.pitch": (float, 0.125),
    "net.max_degree": (int, 2),
    "net.seed": (int, 0),
}

# preset -> io signature it builds
PRESETS = {"inrnet2": "inr->vector", "seg1": "inr->inr", "legendre": "vector->inr"}


@dataclass
class Config:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def resolved(self) -> str:
        """Every key with its effective value, one per line, sorted."""
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(steps=v["train.steps"], batch=v["train.batch"], lr=v["train.lr"],
                           optimizer=v["train.optimizer"], n_points=v["points.n"],
                           sampler=v["points.sampler"], scramble=v["points.scramble"], seed=v["train.seed"],
                           weight_decay=v["train.weight_decay"], noise_dim=v["train.noise_dim"])

    def build_net(self) -> NetworkGraph:
        return build_preset(self.values)


def parse_config(text: str, source: str = "<config>") -> Config:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    values = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key!r}: {raw[key]!r}") from exc
        elif default is REQUIRED:
            raise ConfigError(f"{source}: missing required key {key!r}")
        else:
            values[key] = default
    arch, io = values["net.arch"], values["net.io"]
    if arch not in PRESETS:
        raise ConfigError(f"{source}: unknown net.arch {arch!r}; expected one of {sorted(PRESETS)}")
    if PRESETS[arch] != io:
        raise ConfigError(f"{source}: net.arch {arch!r} builds {PRESETS[arch]!r} but net.io is {io!r}")
    cfg = Config(values)
    try:
        cfg.train_config()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def build_preset(v: dict) -> NetworkGraph:
    """Network presets.

    ``inrnet2``: two spline convolutions with instance norm, relu and a max
    pool, then global pooling and a dense classifier. ``seg1``: a single
    convolution producing one logit channel per class. ``legendre``: a dense
    map from noise to Legendre coefficients of the output INR.
    """
    arch, width, pitch = v["net.arch"], v["net.width"], v["net.pitch"]
    b = GraphBuilder(PRESETS[arch], v["net.in_channels"], seed=v["net.seed"])
    if arch == "inrnet2":
        b.conv(width, k=3, pitch=pitch)
        b.norm("instance")
        b.relu()
        b.maxpool(k=2, pitch=pitch, stride=1)
        b.conv(2 * width, k=3, pitch=2 * pitch)
        b.norm("instance")
        b.relu()
        b.global_pool()
        b.dense(v["net.classes"])
    elif arch == "seg1":
        b.conv(v["net.classes"], k=3, pitch=pitch)
    else:
        n_fun = len(LegendreBasis(Domain.cube(2), v["net.max_degree"]))
        b.dense(n_fun)
        b.legendre_head(1, max_degree=v["net.max_degree"])
    return b.build()
