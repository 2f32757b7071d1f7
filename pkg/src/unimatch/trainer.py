"""Training loop: sampled-softmax objective over mixed-domain batches,
uncertainty-weighted auxiliary losses, plain SGD, metrics logging, and
checkpointing with divergence abort."""

from __future__ import annotations

import csv
import logging
import os

import numpy as np

from . import autodiff as ad
from . import backbone, rrl
from .config import ModelConfig, TrainConfig
from .encoder import EntityCache, encode_training_batch
from .errors import ContractError, DivergenceError, NumericsError
from .model import Model, init_model, save_checkpoint

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "step",
    "L_ce",
    "L_s",
    "L_d",
    "L_wd",
    "L_ortho",
    "w_s",
    "w_d",
    "w_wd",
    "w_ortho",
)

# auxiliary losses in Eq-order: shared adversarial, specific, wasserstein, ortho
_AUX = (("s", "dal"), ("d", "spec"), ("wd", "wd"), ("ortho", "ortho"))

# log sigma^2 kept inside these bounds during optimization: the stationary
# point sigma^2 = L gives a near-zero loss an unbounded effective weight,
# which would let one auxiliary term capture the whole gradient budget
_UWL_S_MIN, _UWL_S_MAX = -2.0, 10.0


def sample_negatives(rng, n_entities, target_id, n_neg):
    """Uniform negatives; a draw equal to the target is rejected and redrawn."""
    out = []
    while len(out) < n_neg:
        cand = int(rng.integers(n_entities))
        if cand != target_id:
            out.append(cand)
    return out


def sampled_softmax_loss(logits, n_negatives, catalog_size):
    """Sampled-softmax cross-entropy, summed over rows.

    `logits` is (n_groups, C) with the target logit in column 0.  Every
    logit is corrected by -log(S * Q) with uniform Q = 1/|catalog|; with
    the full catalog as candidate set this reproduces exact softmax
    cross-entropy.
    """
    if logits.ndim != 2:
        raise ContractError(f"sampled_softmax_loss: expected (groups, C), got {logits.shape}")
    correction = float(np.log(n_negatives / catalog_size))
    corrected = ad.sub(logits, correction)
    lse = ad.logsumexp(corrected, axis=1)
    target = ad.reshape(ad.narrow(corrected, 1, 0, 1), (logits.shape[0],))
    return ad.sum(ad.sub(lse, target))


def uwl_total(model: Model, l_ce, aux, cfg: TrainConfig):
    """Final loss per the uncertainty weighting: L_ce plus, for each active
    auxiliary loss, 1/(2 sigma^2) L + log sigma with sigma^2 = exp(s);
    or a fixed weight when UWL is off.  Toggled-off losses contribute
    nothing.  Returns (loss, effective weights dict)."""
    total = l_ce
    weights = {}
    for short, name in _AUX:
        term_loss = aux.get(name)
        if term_loss is None:
            weights[short] = 0.0
            continue
        if cfg.use_uwl:
            s = model.params[f"uwl.s_{name}"]
            w = ad.scale(ad.exp(ad.scale(s, -1.0)), 0.5)
            total = ad.add(total, ad.add(ad.mul(w, term_loss), ad.scale(s, 0.5)))
            weights[short] = float(w.value)
        else:
            total = ad.add(total, ad.scale(term_loss, cfg.fixed_aux_weight))
            weights[short] = cfg.fixed_aux_weight
    return total, weights


def _forward_losses(model, cache, records, cfg, neg_rng, xi_rng, n_entities, reverse=True):
    """Build every loss for one mixed-domain batch on the active tape.

    `reverse=False` bypasses every gradient-reversal layer, producing the
    plain objective whose tape gradient equals the true value gradient
    (used by finite-difference checks; training always reverses).
    """
    n_cand = cfg.negatives + 1
    candidates = [
        [r["target_id"]] + sample_negatives(neg_rng, n_entities, r["target_id"], cfg.negatives)
        for r in records
    ]
    big = encode_training_batch(model, cache, records, candidates)
    y_rec = np.array([r["domain"] for r in records], dtype=np.int64)

    e_s_all = backbone.shared_expert(model, big)
    l_ce = None
    pos_s, pos_d, y_pos, ocl_slices = [], [], [], []
    for k in range(model.n_domains):
        rec_idx = np.where(y_rec == k)[0]
        if rec_idx.size == 0:
            continue
        row_idx = (rec_idx[:, None] * n_cand + np.arange(n_cand)).reshape(-1)
        rows_k = ad.take_rows(big, row_idx)
        e_s_k = ad.take_rows(e_s_all, row_idx)
        e_d_k = backbone.specific_expert(model, rows_k, k)
        gate_w = backbone.gate(model, k)
        logits_k = backbone.tower(model, backbone.fuse(e_d_k, e_s_k, gate_w), k)
        grouped = ad.reshape(logits_k, (rec_idx.size, n_cand))
        l_k = sampled_softmax_loss(grouped, cfg.negatives, n_entities)
        l_ce = l_k if l_ce is None else ad.add(l_ce, l_k)

        first_rows = np.arange(rec_idx.size) * n_cand
        e_s_pos_k = ad.take_rows(e_s_k, first_rows)
        e_d_pos_k = ad.take_rows(e_d_k, first_rows)
        pos_s.append(e_s_pos_k)
        pos_d.append(e_d_pos_k)
        y_pos.extend([k] * rec_idx.size)
        ocl_slices.append((e_s_pos_k, e_d_pos_k))

    e_s_pos = pos_s[0] if len(pos_s) == 1 else ad.concat(pos_s, axis=0)
    e_d_pos = pos_d[0] if len(pos_d) == 1 else ad.concat(pos_d, axis=0)
    y_pos = np.array(y_pos, dtype=np.int64)

    aux = {"dal": None, "spec": None, "wd": None, "ortho": None}
    wd_info = None
    if cfg.use_dal:
        aux["dal"] = rrl.dal_shared(model, e_s_pos, y_pos, reverse=reverse)
        aux["spec"] = rrl.dal_specific(model, e_d_pos, y_pos)
    if cfg.use_mvwdl:
        aux["wd"], wd_info = rrl.mvwdl_loss(model, e_s_pos, y_pos, xi_rng, reverse=reverse)
    if cfg.use_ocl:
        aux["ortho"] = rrl.ocl(ocl_slices)
    loss, weights = uwl_total(model, l_ce, aux, cfg)
    values = {
        "L_ce": float(l_ce.value),
        "L_s": float(aux["dal"].value) if aux["dal"] is not None else 0.0,
        "L_d": float(aux["spec"].value) if aux["spec"] is not None else 0.0,
        "L_wd": float(aux["wd"].value) if aux["wd"] is not None else 0.0,
        "L_ortho": float(aux["ortho"].value) if aux["ortho"] is not None else 0.0,
    }
    return loss, values, weights, e_s_pos, y_pos, wd_info


def _critic_only_step(model, e_s_values, y_pos, cfg, xi_rng):
    """Extra critic update on detached shared representations."""
    critic_params = [v for k, v in model.params.items() if ".critic" in k]
    with ad.Tape():
        loss, _ = rrl.mvwdl_loss(model, ad.constant(e_s_values), y_pos, xi_rng)
        grads = ad.grad(loss, critic_params)
    for p, g in zip(critic_params, grads):
        p.value = p.value - cfg.lr * g.value


def train_step(model, cache, records, cfg, neg_rng, xi_rng, n_entities):
    names = sorted(model.params)
    params = [model.params[n] for n in names]
    with ad.Tape():
        loss, values, weights, e_s_pos, y_pos, _ = _forward_losses(
            model, cache, records, cfg, neg_rng, xi_rng, n_entities
        )
        grads = ad.grad(loss, params)
    e_s_detached = e_s_pos.value.copy()
    for p, g in zip(params, grads):
        p.value = p.value - cfg.lr * g.value
    if cfg.use_uwl:
        for name in ("s_dal", "s_spec", "s_wd", "s_ortho"):
            s = model.params[f"uwl.{name}"]
            s.value = np.clip(s.value, _UWL_S_MIN, _UWL_S_MAX)
    if cfg.use_mvwdl and cfg.critic_steps > 1:
        for _ in range(cfg.critic_steps - 1):
            _critic_only_step(model, e_s_detached, y_pos, cfg, xi_rng)
    return values, weights


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([row[h] for h in METRICS_HEADER])


def train(catalog, train_records, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir=None, model=None):
    """Run the optimization loop; returns (model, metric rows).

    With `out_dir` set, writes checkpoint.npz and metrics.csv there.  A
    non-finite loss aborts with the last finite checkpoint preserved.
    """
    train_cfg.validate()
    if model is None:
        model = init_model(model_cfg, catalog.n_domains, train_cfg.seed)
    cache = EntityCache.build(catalog, model.cfg)
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(3)
    batch_rng = np.random.default_rng(np.random.PCG64(seeds[0]))
    neg_rng = np.random.default_rng(np.random.PCG64(seeds[1]))
    xi_rng = np.random.default_rng(np.random.PCG64(seeds[2]))
    n_entities = len(catalog)
    metrics = []
    snapshot = model.copy_values()
    step = 0
    ckpt_path = os.path.join(out_dir, "checkpoint.npz") if out_dir else None
    for epoch in range(train_cfg.epochs):
        order = batch_rng.permutation(len(train_records))
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [train_records[i] for i in order[start:start + train_cfg.batch_size]]
            try:
                values, weights = train_step(
                    model, cache, batch, train_cfg, neg_rng, xi_rng, n_entities
                )
            except NumericsError as exc:
                model.restore_values(snapshot)
                if ckpt_path:
                    os.makedirs(out_dir, exist_ok=True)
                    save_checkpoint(model, ckpt_path)
                    write_metrics(os.path.join(out_dir, "metrics.csv"), metrics)
                raise DivergenceError(
                    f"non-finite loss at step {step}: {exc}", checkpoint_path=ckpt_path
                ) from exc
            snapshot = model.copy_values()
            if step % train_cfg.log_every == 0:
                metrics.append(
                    {
                        "step": step,
                        **values,
                        "w_s": weights["s"],
                        "w_d": weights["d"],
                        "w_wd": weights["wd"],
                        "w_ortho": weights["ortho"],
                    }
                )
            step += 1
        log.info("epoch %d done (%d steps)", epoch, step)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(model, ckpt_path)
        write_metrics(os.path.join(out_dir, "metrics.csv"), metrics)
    return model, metrics
