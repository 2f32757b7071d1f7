"""Configuration dataclasses and JSON loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

ENTITY_CLASSES = ("A", "B", "C", "D")


@dataclass
class DataConfig:
    """Synthetic generator settings.

    The planted model scores a (user, entity, domain) triple as
    ``invariant_weight * <z_u, z_a> + specific_weight[k] * <z_u^k, z_a^k> + noise``
    and accepts it as a click with sigmoid probability.
    """

    seed: int = 7
    n_domains: int = 4
    entity_counts: dict = field(
        default_factory=lambda: {"A": 5000, "B": 80, "C": 8, "D": 70}
    )
    n_users: int = 1200
    seq_len: int = 8
    records_per_domain: int = 2500
    invariant_weight: float = 8.0
    specific_weight: float = 6.0
    click_bias: float = -24.0
    noise: float = 0.3
    latent_dim: int = 4
    split_ratio: float = 0.8
    split_by: str = "user"  # "user" or "time"

    def validate(self):
        if self.n_domains < 2:
            raise ConfigError("n_domains must be >= 2")
        if set(self.entity_counts) != set(ENTITY_CLASSES):
            raise ConfigError(f"entity_counts must cover classes {ENTITY_CLASSES}")
        if any(c <= 0 for c in self.entity_counts.values()):
            raise ConfigError("entity counts must be strictly positive")
        if self.records_per_domain <= 0:
            raise ConfigError("records_per_domain must be positive")
        if self.invariant_weight < 0 or self.specific_weight < 0:
            raise ConfigError("signal weights must be >= 0")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio must be in (0, 1)")
        if self.split_by not in ("user", "time"):
            raise ConfigError("split_by must be 'user' or 'time'")
        return self


@dataclass
class ModelConfig:
    embed_dim: int = 16
    id_buckets: int = 2048
    entity_feat_buckets: int = 512
    user_feat_buckets: int = 256
    n_heads: int = 2
    ff_dim: int = 32
    positional_encoding: bool = True
    adnet_hidden: tuple = (32,)
    adnet_out: int = 16
    expert_hidden: tuple = (256, 128, 64)
    tower_hidden: tuple = (128, 64)
    projection_dim: int = 64
    critic_hidden: tuple = (128, 64)
    sn_warmup: int = 20

    def validate(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError("embed_dim must be divisible by n_heads")
        if len(self.expert_hidden) < 1 or len(self.tower_hidden) < 1:
            raise ConfigError("experts and towers need at least one hidden layer")
        return self


@dataclass
class TrainConfig:
    lr: float = 0.03
    batch_size: int = 48
    epochs: int = 3
    negatives: int = 4
    seed: int = 0
    use_dal: bool = True
    use_mvwdl: bool = True
    use_ocl: bool = True
    use_uwl: bool = True
    fixed_aux_weight: float = 0.01
    critic_steps: int = 1
    log_every: int = 1

    def validate(self):
        if self.negatives < 1:
            raise ConfigError("negatives must be >= 1")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr, batch_size, epochs must be positive")
        if self.critic_steps < 1:
            raise ConfigError("critic_steps must be >= 1")
        return self


@dataclass
class IndexConfig:
    n_layers: int = 4
    max_neighbors: int = 16
    ef_construction: int = 200
    seed: int = 13

    def validate(self):
        if self.n_layers < 1 or self.max_neighbors < 1:
            raise ConfigError("n_layers and max_neighbors must be positive")
        return self


@dataclass
class EvalConfig:
    eval_users: int = 2000
    recall_n: tuple = (50, 100, 200, 500, 1000, 2000)
    beam_width: int = 200
    ef_search: int = 400
    seed: int = 5

    def validate(self):
        if self.eval_users < 1:
            raise ConfigError("eval_users must be positive")
        return self


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "index": IndexConfig,
    "eval": EvalConfig,
}


def _from_dict(cls, d):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        if isinstance(getattr(cls(), k), tuple):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs).validate()


def load_config(path_or_dict):
    """Load a JSON config with optional data/model/train/index/eval sections."""
    if isinstance(path_or_dict, dict):
        raw = path_or_dict
    else:
        with open(path_or_dict) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"invalid config JSON: {e}")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return {name: _from_dict(cls, raw.get(name, {})) for name, cls in _SECTIONS.items()}


def fingerprint(*configs):
    """Stable hash of one or more config dataclasses."""
    blob = json.dumps(
        [dataclasses.asdict(c) for c in configs], sort_keys=True, default=list
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
