"""Run configuration and the learning-rate schedule."""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import AugmentConfig, SamplerConfig
from .losses import LossWeights
from .model import ModelConfig
from .synthetic import SyntheticSpec

CONFIG_DIR = Path(__file__).parent / "configs"


@dataclass
class DataConfig:
    root: str | None = None
    annotations: str | None = None
    synthetic: SyntheticSpec | None = None
    seed: int = 0
    expected_train_ids: int | None = None


@dataclass
class OptimConfig:
    base_lr: float = 3.5e-4
    warmup_start_lr: float = 3.5e-6
    min_lr: float = 0.0
    iterations: int = 24000
    warmup_iterations: int = 2000
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0


@dataclass
class RunConfig:
    schema: str = "market"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        backbone="resnet50", image_size=(384, 128), feat_dim=2048, embed_dim=512, sigma=5.0))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    # features fed to the triplet term: "post" (after batch norm) or "pre"
    triplet_features: str = "post"
    seed: int = 0
    output_dir: str | None = None
    log_every: int = 100
    checkpoint_every: int = 0
    eval_protocol_filter: bool = True
    eval_batch_size: int = 128

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.optim.iterations <= self.optim.warmup_iterations:
            raise ValueError("total iterations must exceed warmup iterations")
        if self.triplet_features not in ("post", "pre"):
            raise ValueError("triplet_features must be 'post' or 'pre'")
        if self.data.synthetic is None and self.data.root is None:
            raise ValueError("config needs either data.root or data.synthetic")
        if self.data.root is not None:
            for p in (self.data.root, self.data.annotations):
                if p is None or not Path(p).exists():
                    raise ValueError(f"data path {p!r} does not exist")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"optim.iterations": 10})``."""
        d = self.to_dict()
        for k, v in overrides.items():
            set_path(d, k, v)
        return RunConfig.from_dict(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(tp, value):
    if value is None:
        return None
    origin = typing.get_origin(tp)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _build(args[0], value)
    if dataclasses.is_dataclass(tp):
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp) if f.init}
        unknown = set(value) - names
        if unknown:
            raise ValueError(f"unknown {tp.__name__} field(s): {sorted(unknown)}")
        return tp(**{k: _build(hints[k], v) for k, v in value.items()})
    if origin is tuple:
        return tuple(value)
    return value


def set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        if d.get(k) is None:
            d[k] = {}
        d = d[k]
    d[keys[-1]] = value


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    """Read a YAML run config; overrides are ``dotted.key=value`` strings with YAML values."""
    path = Path(path)
    if not path.exists() and (CONFIG_DIR / path).exists():
        path = CONFIG_DIR / path
    d = yaml.safe_load(path.read_text()) or {}
    for item in overrides or []:
        key, _, raw = item.partition("=")
        set_path(d, key.strip(), yaml.safe_load(raw))
    base = Path(path).parent
    data = d.get("data") or {}
    for key in ("root", "annotations"):
        if data.get(key) and not Path(data[key]).is_absolute():
            data[key] = str((base / data[key]).resolve())
    schema = d.get("schema")
    if schema and Path(schema).suffix in (".yaml", ".yml", ".json") and not Path(schema).is_absolute():
        d["schema"] = str((base / schema).resolve())
    return RunConfig.from_dict(d)


def desk_config(**overrides) -> RunConfig:
    """The shipped CPU-scale synthetic configuration."""
    cfg = load_config(CONFIG_DIR / "synthetic_run.yaml")
    return cfg.replace(**overrides) if overrides else cfg


def learning_rate(it: int, cfg: OptimConfig) -> float:
    """Linear warm-up from ``warmup_start_lr`` to ``base_lr``, then cosine annealing to ``min_lr``."""
    W, T = cfg.warmup_iterations, cfg.iterations
    if it < W:
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * it / W
    progress = min((it - W) / (T - W), 1.0)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))
