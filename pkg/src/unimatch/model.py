"""Model parameter container, initialization, and checkpoint persistence."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import ENTITY_CLASSES, ModelConfig
from .errors import ConfigError

CHECKPOINT_VERSION = 1


def xavier(rng, fan_in, fan_out, shape=None):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape or (fan_in, fan_out))


def mlp_init(params, rng, prefix, dims):
    """Dense layers prefix.w0/b0 ... for consecutive dims."""
    for i in range(len(dims) - 1):
        params[f"{prefix}.w{i}"] = ad.parameter(xavier(rng, dims[i], dims[i + 1]))
        params[f"{prefix}.b{i}"] = ad.parameter(np.zeros(dims[i + 1]))


def mlp_apply(params, prefix, x, n_layers, final_activation=False):
    """ReLU hidden layers; final layer linear unless final_activation."""
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1 or final_activation:
            h = ad.relu(h)
    return h


def feature_dims(n_domains):
    """(categorical entity fields, dense entity fields, user fields)."""
    n_cat = 2 + n_domains + len(ENTITY_CLASSES)
    n_dense = 1
    n_user = 2 + n_domains
    return n_cat, n_dense, n_user


@dataclass
class Model:
    """All learnable parameter groups plus spectral-normalization state."""

    cfg: ModelConfig
    n_domains: int
    params: dict
    sn_state: ad.SpectralState

    @property
    def repr_dim(self):
        return self.cfg.adnet_out + 3 * self.cfg.embed_dim

    @property
    def expert_out(self):
        return self.cfg.expert_hidden[-1]

    def trainable(self):
        return list(self.params.values())

    def named(self):
        return self.params

    def copy_values(self):
        return {k: t.value.copy() for k, t in self.params.items()}

    def restore_values(self, snapshot):
        for k, t in self.params.items():
            t.value = snapshot[k].copy()


def init_model(cfg: ModelConfig, n_domains: int, seed: int) -> Model:
    cfg.validate()
    if n_domains < 2:
        raise ConfigError("model needs at least 2 domains")
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([seed, 0xE11])))
    d = cfg.embed_dim
    n_cat, n_dense, n_user = feature_dims(n_domains)
    p = {}

    # shared embedding tables; row 0 of each bucketed table is <MISSING>
    p["enc.id_table"] = ad.parameter(rng.normal(0, 0.1, size=(cfg.id_buckets + 1, d)))
    p["enc.feat_table"] = ad.parameter(
        rng.normal(0, 0.1, size=(cfg.entity_feat_buckets + 1, d))
    )
    p["enc.user_table"] = ad.parameter(
        rng.normal(0, 0.1, size=(cfg.user_feat_buckets + 1, d))
    )
    p["enc.class_table"] = ad.parameter(
        rng.normal(0, 0.1, size=(len(ENTITY_CLASSES) + 1, d))
    )
    p["enc.domain_table"] = ad.parameter(rng.normal(0, 0.1, size=(n_domains, d)))

    # user profile projection into token space
    p["enc.user_proj.w"] = ad.parameter(xavier(rng, n_user * d, d))
    p["enc.user_proj.b"] = ad.parameter(np.zeros(d))

    # one transformer encoder block
    for name in ("wq", "wk", "wv", "wo"):
        p[f"enc.attn.{name}"] = ad.parameter(xavier(rng, d, d))
    for ln in ("ln1", "ln2"):
        p[f"enc.{ln}.g"] = ad.parameter(np.ones(d))
        p[f"enc.{ln}.b"] = ad.parameter(np.zeros(d))
    p["enc.ff.w1"] = ad.parameter(xavier(rng, d, cfg.ff_dim))
    p["enc.ff.b1"] = ad.parameter(np.zeros(cfg.ff_dim))
    p["enc.ff.w2"] = ad.parameter(xavier(rng, cfg.ff_dim, d))
    p["enc.ff.b2"] = ad.parameter(np.zeros(d))

    # entity perceptron (class-blind, one function for all entities)
    ent_in = n_cat * d + d + n_dense
    mlp_init(p, rng, "enc.adnet", (ent_in, *cfg.adnet_hidden, cfg.adnet_out))

    # backbone: shared + specific experts, gates, towers
    d_r = cfg.adnet_out + 3 * d
    expert_dims = (d_r, *cfg.expert_hidden)
    mlp_init(p, rng, "bb.shared", expert_dims)
    for k in range(n_domains):
        mlp_init(p, rng, f"bb.spec{k}", expert_dims)
        p[f"bb.gate{k}"] = ad.parameter(xavier(rng, d, 2))
        mlp_init(p, rng, f"bb.tower{k}", (3 * cfg.expert_hidden[-1], *cfg.tower_hidden, 1))

    # robust representation learning heads
    e_out = cfg.expert_hidden[-1]
    p["rrl.cls_s.w"] = ad.parameter(xavier(rng, e_out, n_domains))
    p["rrl.cls_s.b"] = ad.parameter(np.zeros(n_domains))
    p["rrl.cls_d.w"] = ad.parameter(xavier(rng, e_out, n_domains))
    p["rrl.cls_d.b"] = ad.parameter(np.zeros(n_domains))
    for t in range(n_domains):
        p[f"rrl.proj{t}.w"] = ad.parameter(xavier(rng, e_out, cfg.projection_dim))
        p[f"rrl.proj{t}.b"] = ad.parameter(np.zeros(cfg.projection_dim))
    for t in range(n_domains - 1):
        mlp_init(p, rng, f"rrl.critic{t}", (cfg.projection_dim, *cfg.critic_hidden, 1))

    # uncertainty weights: log sigma^2 per auxiliary loss
    for name in ("s_dal", "s_spec", "s_wd", "s_ortho"):
        p[f"uwl.{name}"] = ad.parameter(0.0)

    sn_state = ad.SpectralState.initialize(
        p["rrl.cls_s.w"].value, rng, warmup=cfg.sn_warmup
    )
    return Model(cfg=cfg, n_domains=n_domains, params=p, sn_state=sn_state)


def save_checkpoint(model: Model, path):
    """Versioned npz dump of every named parameter group; bit-exact."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "n_domains": model.n_domains,
        "cfg": dataclasses.asdict(model.cfg),
        "sn_n_iters": model.sn_state.n_iters,
    }
    arrays = {f"param/{k}": t.value for k, t in model.params.items()}
    arrays["sn/u"] = model.sn_state.u
    arrays["sn/v"] = model.sn_state.v
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> Model:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta['version']}")
        cfg_dict = meta["cfg"]
        for key, val in cfg_dict.items():
            if isinstance(val, list):
                cfg_dict[key] = tuple(val)
        cfg = ModelConfig(**cfg_dict)
        params = {
            k[len("param/"):]: ad.parameter(data[k])
            for k in data.files
            if k.startswith("param/")
        }
        sn_state = ad.SpectralState(
            u=data["sn/u"].copy(), v=data["sn/v"].copy(), n_iters=meta["sn_n_iters"]
        )
    return Model(cfg=cfg, n_domains=meta["n_domains"], params=params, sn_state=sn_state)
