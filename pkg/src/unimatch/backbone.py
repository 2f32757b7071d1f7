"""Hybrid-expert scoring network: one shared expert, per-domain specific
experts, gate units over the domain-indicator embedding, and per-domain
towers producing one logit per (user, candidate) pair."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError
from .model import Model, mlp_apply


def shared_expert(model: Model, rows):
    """Domain-invariant representation; parameters see every domain's rows."""
    n_layers = len(model.cfg.expert_hidden)
    return mlp_apply(model.params, "bb.shared", rows, n_layers, final_activation=True)


def specific_expert(model: Model, rows_k, k):
    """Domain-k representation; parameters see only domain-k rows."""
    if rows_k.shape[0] == 0:
        raise ContractError("specific_expert: empty domain batch")
    n_layers = len(model.cfg.expert_hidden)
    return mlp_apply(model.params, f"bb.spec{k}", rows_k, n_layers, final_activation=True)


def gate(model: Model, k):
    """Two sigmoid weights for domain k from its indicator embedding:
    index 0 scales the specific representation, index 1 the shared one."""
    e_did = ad.take_rows(model.params["enc.domain_table"], np.array([k]))
    return ad.sigmoid(ad.matmul(e_did, model.params[f"bb.gate{k}"]))


def fuse(e_d, e_s, w):
    """Gated concat fusion: [w0*E_d, (w0*E_d) (hadamard) (w1*E_s), w1*E_s]."""
    if e_d.shape != e_s.shape:
        raise DimensionError(f"fuse: shape mismatch {e_d.shape} vs {e_s.shape}")
    w0 = ad.narrow(w, 1, 0, 1)
    w1 = ad.narrow(w, 1, 1, 1)
    gd = ad.mul(e_d, w0)
    gs = ad.mul(e_s, w1)
    return ad.concat([gd, ad.mul(gd, gs), gs], axis=1)


def tower(model: Model, fused_k, k):
    """Per-domain tower: one real-valued logit per candidate row."""
    n_layers = len(model.cfg.tower_hidden) + 1
    return mlp_apply(model.params, f"bb.tower{k}", fused_k, n_layers)


def domain_logits(model: Model, rows_k, k, e_s_k=None):
    """Full domain-k path from representation rows to logits.

    Returns (logits (n, 1), E_s rows, E_d rows); E_s may be passed in when
    already computed on a larger batch.
    """
    if e_s_k is None:
        e_s_k = shared_expert(model, rows_k)
    e_d_k = specific_expert(model, rows_k, k)
    w = gate(model, k)
    fused = fuse(e_d_k, e_s_k, w)
    return tower(model, fused, k), e_s_k, e_d_k
