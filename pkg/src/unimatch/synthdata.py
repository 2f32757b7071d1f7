"""Deterministic synthetic multi-entity, multi-domain interaction data.

Entities come in four classes with heavily skewed counts and partially
disjoint feature schemas.  Users click entities according to a planted
preference model with a domain-invariant component and a per-domain
specific component, so the adversarial and alignment losses have real
structure to recover.  The unified-entity-space step (`unify`) maps every
record onto one schema, filling class-unique fields of other classes with
declared defaults.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .config import ENTITY_CLASSES, DataConfig
from .errors import ConfigError, SchemaError

log = logging.getLogger(__name__)

MISSING = "<MISSING>"

_CLASS_UNIQUE = {
    "A": "brand_tier",
    "B": "shop_age",
    "C": "video_len",
    "D": "live_slot",
}


@dataclass
class FieldSpec:
    name: str
    kind: str  # "categorical" or "dense"
    owner: str  # "shared" or an entity class letter
    default: object


@dataclass
class Schema:
    """Ordered unified entity-feature schema with per-field defaults."""

    fields: list

    def field_names(self):
        return [f.name for f in self.fields]

    def to_dict(self):
        return {
            "fields": [
                {"name": f.name, "kind": f.kind, "owner": f.owner, "default": f.default}
                for f in self.fields
            ]
        }

    @classmethod
    def from_dict(cls, d):
        return cls(fields=[FieldSpec(**f) for f in d["fields"]])


def build_schema(n_domains):
    fields = [
        FieldSpec("cat_coarse", "categorical", "shared", MISSING),
        FieldSpec("cat_fine", "categorical", "shared", MISSING),
    ]
    for k in range(n_domains):
        fields.append(FieldSpec(f"style_d{k}", "categorical", "shared", MISSING))
    fields.append(FieldSpec("popularity", "dense", "shared", 0.0))
    for cls_name in ENTITY_CLASSES:
        fields.append(FieldSpec(_CLASS_UNIQUE[cls_name], "categorical", cls_name, MISSING))
    return Schema(fields=fields)


@dataclass
class Catalog:
    """All entities: ids, classes, planted latents, and raw feature dicts."""

    schema: Schema
    n_domains: int
    ids: np.ndarray
    classes: list
    z_inv: np.ndarray  # (n, d) invariant latents
    z_spec: np.ndarray  # (K, n, d) per-domain latents
    feats: list  # class-specific feature dicts, one per entity
    counts: dict

    def __len__(self):
        return len(self.ids)

    def class_of(self, entity_id):
        return self.classes[entity_id]

    def unified_feats(self, entity_id):
        return unify_feats(self.feats[entity_id], self.classes[entity_id], self.schema)

    def save(self, path):
        payload = {
            "version": 1,
            "n_domains": self.n_domains,
            "schema": self.schema.to_dict(),
            "counts": self.counts,
            "classes": self.classes,
            "feats": self.feats,
            "z_inv": self.z_inv.tolist(),
            "z_spec": self.z_spec.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        n = len(payload["classes"])
        return cls(
            schema=Schema.from_dict(payload["schema"]),
            n_domains=payload["n_domains"],
            ids=np.arange(n, dtype=np.int64),
            classes=payload["classes"],
            z_inv=np.array(payload["z_inv"]),
            z_spec=np.array(payload["z_spec"]),
            feats=payload["feats"],
            counts={k: int(v) for k, v in payload["counts"].items()},
        )


def _bucket2d(vec, scale, bins=4):
    """Quantile-bin a 2-vector of N(0, scale^2) entries into bins*bins cells."""
    edges = scale * np.array([-0.6745, 0.0, 0.6745])
    b0 = int(np.searchsorted(edges, vec[0]))
    b1 = int(np.searchsorted(edges, vec[1]))
    return b0 * bins + b1


def planted_latents(config: DataConfig):
    """Draw all planted latent vectors; deterministic given the seed."""
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    d = config.latent_dim
    scale = d ** -0.25
    n_entities = sum(config.entity_counts.values())
    z_user = rng.normal(0.0, scale, size=(config.n_users, d))
    z_user_k = rng.normal(0.0, scale, size=(config.n_domains, config.n_users, d))
    z_ent = rng.normal(0.0, scale, size=(n_entities, d))
    z_ent_k = rng.normal(0.0, scale, size=(config.n_domains, n_entities, d))
    return z_user, z_user_k, z_ent, z_ent_k, scale


def build_catalog(config: DataConfig, z_ent, z_ent_k, scale, rng):
    schema = build_schema(config.n_domains)
    classes = []
    for cls_name in ENTITY_CLASSES:
        classes.extend([cls_name] * config.entity_counts[cls_name])
    n = len(classes)
    feats = []
    for i in range(n):
        f = {
            "cat_coarse": _bucket2d(z_ent[i, 0:2], scale),
            "cat_fine": _bucket2d(z_ent[i, 2:4], scale),
        }
        for k in range(config.n_domains):
            f[f"style_d{k}"] = _bucket2d(z_ent_k[k, i, 0:2], scale)
        f["popularity"] = round(float(1.0 / (1.0 + np.exp(-z_ent[i].sum() / scale))), 6)
        f[_CLASS_UNIQUE[classes[i]]] = int(rng.integers(8))
        feats.append(f)
    return Catalog(
        schema=schema,
        n_domains=config.n_domains,
        ids=np.arange(n, dtype=np.int64),
        classes=classes,
        z_inv=z_ent,
        z_spec=z_ent_k,
        feats=feats,
        counts=dict(config.entity_counts),
    )


def user_features(config: DataConfig, z_user, z_user_k, scale):
    """Per-user profile feature dicts derived from planted latents."""
    out = []
    for u in range(config.n_users):
        f = {
            "pref_coarse": _bucket2d(z_user[u, 0:2], scale),
            "pref_fine": _bucket2d(z_user[u, 2:4], scale),
        }
        for k in range(config.n_domains):
            f[f"taste_d{k}"] = _bucket2d(z_user_k[k, u, 0:2], scale)
        out.append(f)
    return out


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x)) if x >= 0 else np.exp(x) / (1.0 + np.exp(x))


def generate(config: DataConfig):
    """Generate (catalog, records).  Byte-identical output for equal configs.

    Positives are emitted by rejection sampling: propose a uniform
    (user, entity) pair for the current domain and accept it with the
    planted click probability.  Negatives are not stored; training samples
    them on the fly.
    """
    config.validate()
    z_user, z_user_k, z_ent, z_ent_k, scale = planted_latents(config)
    rng = np.random.default_rng(np.random.PCG64(config.seed + 1))
    catalog = build_catalog(config, z_ent, z_ent_k, scale, rng)
    ufeats = user_features(config, z_user, z_user_k, scale)
    n_entities = len(catalog)
    histories = defaultdict(list)
    records = []
    pos = 0
    alpha, beta, noise = config.invariant_weight, config.specific_weight, config.noise
    max_attempts = 2_000_000
    for _ in range(config.records_per_domain):
        for k in range(config.n_domains):
            for attempt in range(max_attempts):
                u = int(rng.integers(config.n_users))
                a = int(rng.integers(n_entities))
                score = config.click_bias + alpha * float(
                    z_user[u] @ z_ent[a]
                ) + beta * float(z_user_k[k, u] @ z_ent_k[k, a])
                if noise > 0:
                    score += noise * float(rng.standard_normal())
                if rng.random() < _sigmoid(score):
                    break
            else:
                raise ConfigError(
                    "click acceptance too low; check signal weights vs click_bias"
                )
            seq = [list(item) for item in histories[u][-config.seq_len:]]
            records.append(
                {
                    "user_id": u,
                    "user_feats": dict(ufeats[u]),
                    "sequence": seq,
                    "target_id": a,
                    "target_class": catalog.classes[a],
                    "entity_feats": dict(catalog.feats[a]),
                    "domain": k,
                    "label": 1,
                    "pos": pos,
                }
            )
            histories[u].append((a, catalog.classes[a]))
            pos += 1
    return catalog, records


def unify_feats(feats, entity_class, schema):
    """Fill missing class-unique fields with schema defaults; fixed order."""
    if entity_class not in ENTITY_CLASSES:
        raise SchemaError(f"unknown entity class {entity_class!r}")
    out = {}
    for f in schema.fields:
        if f.name in feats:
            out[f.name] = feats[f.name]
        else:
            out[f.name] = f.default
    return out


def unify(record, schema):
    """Map a record onto the unified schema (idempotent)."""
    out = dict(record)
    out["entity_feats"] = unify_feats(
        record["entity_feats"], record["target_class"], schema
    )
    return out


def split(records, ratio, by="user", seed=0):
    """Split into (train, test); user-disjoint or stream-ordered."""
    if not 0 < ratio < 1:
        raise ConfigError("split ratio must be in (0, 1)")
    if by == "user":
        users = sorted({r["user_id"] for r in records})
        rng = np.random.default_rng(np.random.PCG64(seed))
        perm = rng.permutation(len(users))
        cut = int(round(len(users) * ratio))
        train_users = {users[i] for i in perm[:cut]}
        train = [r for r in records if r["user_id"] in train_users]
        test = [r for r in records if r["user_id"] not in train_users]
    elif by == "time":
        ordered = sorted(records, key=lambda r: r["pos"])
        cut = int(round(len(ordered) * ratio))
        train, test = ordered[:cut], ordered[cut:]
    else:
        raise ConfigError("split by must be 'user' or 'time'")
    for name, part in (("train", train), ("test", test)):
        counts = Counter(r["domain"] for r in part)
        log.info("split %s per-domain counts: %s", name, dict(sorted(counts.items())))
        domains = {r["domain"] for r in records}
        missing = domains - set(counts)
        if missing:
            log.warning(
                "split %s has empty domains %s (counts %s)",
                name,
                sorted(missing),
                dict(sorted(counts.items())),
            )
    return train, test


_RECORD_KEYS = (
    "user_id",
    "user_feats",
    "sequence",
    "target_id",
    "target_class",
    "entity_feats",
    "domain",
    "label",
    "pos",
)


def write_records(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({k: r[k] for k in _RECORD_KEYS}) + "\n")


def read_records(path):
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def validate_records(records, n_domains, schema=None):
    """Check required record fields, domain range, and entity classes.

    Raises SchemaError on the first malformed record; returns the records
    for chaining.
    """
    for i, r in enumerate(records):
        missing = [k for k in _RECORD_KEYS if k not in r]
        if missing:
            raise SchemaError(f"record {i} missing fields {missing}")
        if not 0 <= r["domain"] < n_domains:
            raise SchemaError(f"record {i} has domain {r['domain']} outside 0..{n_domains - 1}")
        if r["target_class"] not in ENTITY_CLASSES:
            raise SchemaError(f"record {i} has unknown entity class {r['target_class']!r}")
        if schema is not None:
            unify(r, schema)
    return records
