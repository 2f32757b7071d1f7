"""Record encoders: shared embeddings, entity perceptron, user transformer,
and target attention, producing the concatenated representation fed to the
hybrid-expert backbone.

All functions are pure in (parameters, inputs) and safe for parallel
read-only evaluation over frozen parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import ENTITY_CLASSES, ModelConfig
from .errors import DimensionError
from .model import Model, mlp_apply
from .synthdata import MISSING, Schema

log = logging.getLogger(__name__)

_CLASS_INDEX = {c: i + 1 for i, c in enumerate(ENTITY_CLASSES)}  # row 0 = <MISSING>
_LN_EPS = 1e-6
_MASK_BIAS = -1e9


def fnv1a(text):
    """Stable 64-bit FNV-1a; process-independent hashing for buckets."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def hash_bucket(field, value, n_buckets):
    """Bucket id in [1, n_buckets]; the <MISSING> token maps to row 0."""
    if value == MISSING:
        return 0
    return 1 + fnv1a(f"{field}={value}") % n_buckets


def id_bucket(entity_id, n_buckets):
    return 1 + fnv1a(f"id={entity_id}") % n_buckets


def positional_encoding(length, dim):
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


@dataclass
class EntityCache:
    """Precomputed token ids and dense features for every catalog entity."""

    cat_tokens: np.ndarray  # (n, n_cat_fields) rows into feat_table
    class_idx: np.ndarray  # (n,) rows into class_table
    id_rows: np.ndarray  # (n,) rows into id_table
    dense: np.ndarray  # (n, n_dense)
    schema: Schema

    @classmethod
    def build(cls, catalog, cfg: ModelConfig):
        schema = catalog.schema
        cat_fields = [f.name for f in schema.fields if f.kind == "categorical"]
        dense_fields = [f.name for f in schema.fields if f.kind == "dense"]
        n = len(catalog)
        cat = np.zeros((n, len(cat_fields)), dtype=np.int64)
        dense = np.zeros((n, len(dense_fields)))
        cls_idx = np.zeros(n, dtype=np.int64)
        ids = np.zeros(n, dtype=np.int64)
        for i in range(n):
            feats = catalog.unified_feats(i)
            for j, name in enumerate(cat_fields):
                cat[i, j] = hash_bucket(name, feats[name], cfg.entity_feat_buckets)
            for j, name in enumerate(dense_fields):
                dense[i, j] = float(feats[name])
            cls_idx[i] = _CLASS_INDEX[catalog.classes[i]]
            ids[i] = id_bucket(int(catalog.ids[i]), cfg.id_buckets)
        return cls(cat_tokens=cat, class_idx=cls_idx, id_rows=ids, dense=dense, schema=schema)


def user_token_rows(user_feats, cfg: ModelConfig):
    names = sorted(user_feats)
    return np.array(
        [hash_bucket(n, user_feats[n], cfg.user_feat_buckets) for n in names],
        dtype=np.int64,
    )


def sequence_rows(sequence, cfg: ModelConfig):
    """(id rows, class rows) for a behavior sequence; empty -> <MISSING>."""
    if len(sequence) == 0:
        return np.array([0], dtype=np.int64), np.array([0], dtype=np.int64), True
    ids = np.array([id_bucket(int(e), cfg.id_buckets) for e, _ in sequence], dtype=np.int64)
    cls = np.array([_CLASS_INDEX.get(c, 0) for _, c in sequence], dtype=np.int64)
    return ids, cls, False


def embed_entities(model: Model, cache: EntityCache, entity_ids):
    """Entity feature block for the given entity ids: categorical embeddings,
    class-indicator embedding, and dense features concatenated."""
    p = model.params
    d = model.cfg.embed_dim
    ids = np.asarray(entity_ids, dtype=np.int64)
    n = len(ids)
    n_fields = cache.cat_tokens.shape[1]
    flat = cache.cat_tokens[ids].reshape(-1)
    cat = ad.reshape(ad.take_rows(p["enc.feat_table"], flat), (n, n_fields * d))
    cls_emb = ad.take_rows(p["enc.class_table"], cache.class_idx[ids])
    dense = ad.constant(cache.dense[ids])
    return ad.concat([cat, cls_emb, dense], axis=1)


def embed_target_ids(model: Model, cache: EntityCache, entity_ids):
    ids = np.asarray(entity_ids, dtype=np.int64)
    return ad.take_rows(model.params["enc.id_table"], cache.id_rows[ids])


def ad_network(model: Model, entity_block):
    """Class-blind perceptron from the unified entity block to E_uee."""
    n_layers = len(model.cfg.adnet_hidden) + 1
    return mlp_apply(model.params, "enc.adnet", entity_block, n_layers)


def _layer_norm(p, prefix, x):
    mu = ad.mean(x, axis=1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.mean(ad.square(centered), axis=1, keepdims=True)
    normed = ad.mul(centered, ad.recip(ad.sqrt(ad.add(var, _LN_EPS))))
    return ad.add(ad.mul(normed, p[f"{prefix}.g"]), p[f"{prefix}.b"])


def _attention(q, k, v, dim, mask_bias):
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dim))
    if mask_bias is not None:
        scores = ad.add(scores, ad.constant(mask_bias))
    weights = ad.softmax(scores, axis=1)
    return ad.matmul(weights, v), weights


def user_transform(model: Model, user_vec, seq_emb, mask=None):
    """One transformer encoder block over the behavior sequence, mean-pooled
    over unmasked positions.  `user_vec` (1, d) is added to every token.

    mask: optional boolean (L,) array, True for real positions.
    """
    cfg = model.cfg
    d = cfg.embed_dim
    L = seq_emb.shape[0]
    if mask is None:
        mask = np.ones(L, dtype=bool)
    tokens = ad.add(seq_emb, user_vec)
    if cfg.positional_encoding:
        tokens = ad.add(tokens, ad.constant(positional_encoding(L, d)))
    mask_bias = np.where(mask, 0.0, _MASK_BIAS)[None, :]
    pool = (mask.astype(np.float64) / mask.sum())[None, :]
    return transformer_block(model, tokens, mask_bias, pool)


def target_attention(seq_emb, target_emb, mask=None, empty=False):
    """Scaled dot-product attention: query = target embedding(s),
    keys/values = behavior sequence embeddings."""
    if seq_emb.shape[1] != target_emb.shape[1]:
        raise DimensionError(
            f"target_attention: dim mismatch {seq_emb.shape} vs {target_emb.shape}"
        )
    if empty:
        log.debug("target_attention: empty sequence, returning zero vector")
        return ad.constant(np.zeros((target_emb.shape[0], target_emb.shape[1])))
    d = seq_emb.shape[1]
    mask_bias = None
    if mask is not None:
        mask_bias = np.where(mask, 0.0, _MASK_BIAS)[None, :]
    out, _ = _attention(target_emb, seq_emb, seq_emb, d, mask_bias)
    return out


@dataclass
class UserContext:
    """User-side encodings reused across candidate batches."""

    e_tran: object  # (1, d)
    seq_emb: object  # (L, d)
    mask: np.ndarray
    empty: bool


def prepare_user(model: Model, user_feats, sequence):
    """Encode the candidate-independent user side of the representation."""
    p = model.params
    cfg = model.cfg
    rows = user_token_rows(user_feats, cfg)
    u_flat = ad.reshape(ad.take_rows(p["enc.user_table"], rows), (1, len(rows) * cfg.embed_dim))
    user_vec = ad.add(ad.matmul(u_flat, p["enc.user_proj.w"]), p["enc.user_proj.b"])
    id_rows, cls_rows, empty = sequence_rows(sequence, cfg)
    if empty:
        log.debug("user_transform: empty sequence, using <MISSING> token")
    seq_emb = ad.add(
        ad.take_rows(p["enc.id_table"], id_rows),
        ad.take_rows(p["enc.class_table"], cls_rows),
    )
    mask = np.ones(len(id_rows), dtype=bool)
    e_tran = user_transform(model, user_vec, seq_emb, mask)
    return UserContext(e_tran=e_tran, seq_emb=seq_emb, mask=mask, empty=empty)


def encode_pairs(model: Model, cache: EntityCache, ctx: UserContext, candidate_ids):
    """Representation rows for (user, candidate) pairs: one row per candidate,
    columns [E_uee | E_tran | E_att | E_aid]."""
    n = len(candidate_ids)
    e_uee = ad_network(model, embed_entities(model, cache, candidate_ids))
    e_aid = embed_target_ids(model, cache, candidate_ids)
    e_att = target_attention(ctx.seq_emb, e_aid, ctx.mask, empty=ctx.empty)
    e_tran = ad.broadcast_to(ctx.e_tran, (n, model.cfg.embed_dim))
    return ad.concat([e_uee, e_tran, e_att, e_aid], axis=1)


def transformer_block(model: Model, tokens, attn_bias, pool):
    """One encoder block over (possibly concatenated) token rows.

    attn_bias is an additive constant on the attention scores (block
    structure and padding); pool is a constant (users, tokens) matrix of
    mean-pooling weights."""
    p = model.params
    cfg = model.cfg
    dh = cfg.embed_dim // cfg.n_heads
    q = ad.matmul(tokens, p["enc.attn.wq"])
    k = ad.matmul(tokens, p["enc.attn.wk"])
    v = ad.matmul(tokens, p["enc.attn.wv"])
    heads = []
    for h in range(cfg.n_heads):
        qh = ad.narrow(q, 1, h * dh, dh)
        kh = ad.narrow(k, 1, h * dh, dh)
        vh = ad.narrow(v, 1, h * dh, dh)
        out, _ = _attention(qh, kh, vh, dh, attn_bias)
        heads.append(out)
    attn_out = ad.matmul(ad.concat(heads, axis=1), p["enc.attn.wo"])
    x1 = _layer_norm(p, "enc.ln1", ad.add(tokens, attn_out))
    ff = ad.add(
        ad.matmul(ad.relu(ad.add(ad.matmul(x1, p["enc.ff.w1"]), p["enc.ff.b1"])), p["enc.ff.w2"]),
        p["enc.ff.b2"],
    )
    x2 = _layer_norm(p, "enc.ln2", ad.add(x1, ff))
    return ad.matmul(ad.constant(pool), x2)


def encode_training_batch(model: Model, cache: EntityCache, records, candidate_lists):
    """Representation rows for a whole batch in one pass.

    All users' behavior sequences are concatenated and attended with a
    block-diagonal bias, so one transformer evaluation serves the batch;
    per-row results match the per-user path.  Returns rows grouped per
    record: [E_uee | E_tran | E_att | E_aid], one row per candidate.
    """
    p = model.params
    cfg = model.cfg
    d = cfg.embed_dim
    n_rec = len(records)

    # user-profile tokens -> one projected vector per user
    urows = np.concatenate([user_token_rows(r["user_feats"], cfg) for r in records])
    n_uf = len(urows) // n_rec
    u_flat = ad.reshape(ad.take_rows(p["enc.user_table"], urows), (n_rec, n_uf * d))
    user_vecs = ad.add(ad.matmul(u_flat, p["enc.user_proj.w"]), p["enc.user_proj.b"])

    # concatenated behavior sequences with block bookkeeping
    seq_ids, seq_cls, lengths, pos_blocks = [], [], [], []
    for r in records:
        ids, cls, _empty = sequence_rows(r["sequence"], cfg)
        seq_ids.append(ids)
        seq_cls.append(cls)
        lengths.append(len(ids))
        pos_blocks.append(positional_encoding(len(ids), d))
    seq_ids = np.concatenate(seq_ids)
    seq_cls = np.concatenate(seq_cls)
    total = len(seq_ids)
    owner = np.repeat(np.arange(n_rec), lengths)
    seq_emb = ad.add(
        ad.take_rows(p["enc.id_table"], seq_ids), ad.take_rows(p["enc.class_table"], seq_cls)
    )
    tokens = ad.add(seq_emb, ad.take_rows(user_vecs, owner))
    if cfg.positional_encoding:
        tokens = ad.add(tokens, ad.constant(np.concatenate(pos_blocks)))
    same = owner[:, None] == owner[None, :]
    block_bias = np.where(same, 0.0, _MASK_BIAS)
    pool = np.zeros((n_rec, total))
    start = 0
    for i, L in enumerate(lengths):
        pool[i, start:start + L] = 1.0 / L
        start += L
    e_tran = transformer_block(model, tokens, block_bias, pool)

    # candidate side, all (record, candidate) pairs flattened
    flat_cands = np.concatenate([np.asarray(c, dtype=np.int64) for c in candidate_lists])
    cand_owner = np.repeat(np.arange(n_rec), [len(c) for c in candidate_lists])
    e_uee = ad_network(model, embed_entities(model, cache, flat_cands))
    e_aid = embed_target_ids(model, cache, flat_cands)

    # target attention: block-restricted to the owning user's sequence
    att_bias = np.where(cand_owner[:, None] == owner[None, :], 0.0, _MASK_BIAS)
    e_att, _ = _attention(e_aid, seq_emb, seq_emb, d, att_bias)
    e_tran_rows = ad.take_rows(e_tran, cand_owner)
    return ad.concat([e_uee, e_tran_rows, e_att, e_aid], axis=1)


def embed_record(model: Model, cache: EntityCache, record):
    """Raw embedding bundle for one unified record (contract surface)."""
    cfg = model.cfg
    p = model.params
    rows = user_token_rows(record["user_feats"], cfg)
    id_rows, cls_rows, empty = sequence_rows(record["sequence"], cfg)
    return {
        "E_u": ad.take_rows(p["enc.user_table"], rows),
        "E_seq": ad.take_rows(p["enc.id_table"], id_rows),
        "E_seq_class": ad.take_rows(p["enc.class_table"], cls_rows),
        "E_aid": ad.take_rows(
            p["enc.id_table"], np.array([id_bucket(record["target_id"], cfg.id_buckets)])
        ),
        "E_did": ad.take_rows(p["enc.domain_table"], np.array([record["domain"]])),
        "E_ac": ad.take_rows(
            p["enc.class_table"], np.array([_CLASS_INDEX[record["target_class"]]])
        ),
        "empty_sequence": empty,
    }
