"""Robust representation learning losses.

Four auxiliary losses over the expert representations:

* shared adversarial loss: a spectrally normalized domain classifier sits
  behind a gradient reversal layer, so one descent pass makes the
  classifier better while the shared expert learns to confuse it;
* specific discriminative loss: a plain domain classifier both it and the
  specific experts descend;
* multi-view Wasserstein alignment: per-domain projections of the shared
  representation, critics over consecutive projection pairs with a
  gradient penalty enforcing the 1-Lipschitz condition.  Critics ascend
  the weighted score gap and descend the penalty; projections and the
  shared expert descend everything.  Both directions are realized in a
  single backward pass with gradient reversal, while the reported loss
  value keeps its natural sign (score gap plus penalty);
* orthogonality loss: squared Frobenius deviation of the batch-normalized
  shared/specific cross-Gram from the identity.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .model import Model, mlp_apply

log = logging.getLogger(__name__)


def _one_hot(y_id, n_classes):
    y = np.asarray(y_id, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ContractError(f"domain ids must be in [0, {n_classes}), got {sorted(set(y.tolist()))}")
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def _cross_entropy(logits, y_id, n_classes):
    """Mean softmax cross-entropy against integer domain labels."""
    onehot = ad.constant(_one_hot(y_id, n_classes))
    lse = ad.logsumexp(logits, axis=1)
    picked = ad.sum(ad.mul(logits, onehot), axis=1)
    return ad.mean(ad.sub(lse, picked))


def shared_classifier_logits(model: Model, e_s, reverse=True):
    """Spectrally normalized shared-domain classifier; the input passes
    through gradient reversal unless `reverse` is disabled (used by the
    explicit two-pass reference in tests)."""
    w_hat = ad.spectral_normalize(model.params["rrl.cls_s.w"], model.sn_state)
    x = ad.grad_reverse(e_s) if reverse else e_s
    return ad.add(ad.matmul(x, w_hat), model.params["rrl.cls_s.b"])


def dal_shared(model: Model, e_s, y_id, reverse=True):
    """Adversarial loss on the shared representation (mean over batch)."""
    return _cross_entropy(shared_classifier_logits(model, e_s, reverse), y_id, model.n_domains)


def dal_specific(model: Model, e_d_rows, y_id):
    """Discriminative loss on specific representations; no reversal, both
    the classifier and the specific experts descend it."""
    logits = ad.add(
        ad.matmul(e_d_rows, model.params["rrl.cls_d.w"]), model.params["rrl.cls_d.b"]
    )
    return _cross_entropy(logits, y_id, model.n_domains)


def critic_apply(model: Model, t, x):
    n_layers = len(model.cfg.critic_hidden) + 1
    return mlp_apply(model.params, f"rrl.critic{t}", x, n_layers)


def project(model: Model, t, e_s):
    return ad.add(ad.matmul(e_s, model.params[f"rrl.proj{t}.w"]), model.params[f"rrl.proj{t}.b"])


def mvwdl_weight(scores, y_id, t, counts):
    """Per-sample score weights for perspective t.

    Own-domain samples are scaled by 1/|D_t|, all others by 1/(|D|-|D_t|),
    with both counts clamped to at least one.
    """
    y = np.asarray(y_id)
    n = y.size
    own = max(int(counts[t]), 1)
    other = max(n - int(counts[t]), 1)
    w = np.where(y == t, 1.0 / own, 1.0 / other)[:, None]
    return ad.mul(scores, ad.constant(w))


def _ensure_grad(x):
    if x.requires_grad:
        return x
    return ad.Tensor(x.value.copy(), requires_grad=True)


_GP_EPS = 1e-24  # keeps the norm's backward finite when a critic gradient is 0


def gradient_penalty(model: Model, t, interp):
    """Mean (||grad_x C_t(x)||_2 - 1)^2 over interpolate rows, differentiable
    with respect to the critic parameters (double backprop)."""
    grads = ad.input_gradient(lambda v: critic_apply(model, t, v), interp)
    norms = ad.sqrt(ad.add(ad.sum(ad.square(grads), axis=1), _GP_EPS))
    return ad.mean(ad.square(ad.sub(norms, 1.0)))


def wasserstein_pair_loss(model: Model, t, x_t, x_t1, y_id, counts, xi, reverse=True):
    """Critic-t objective over consecutive projected views.

    Returns (loss node, score gap float, penalty float).  The node's value
    is gap + penalty; its backward pass makes the critic ascend the gap
    and descend the penalty while everything upstream descends both.

    Both views are weighted under perspective t (the critic's index), so
    identical views give an exactly zero score difference.
    """
    with ad.tape_scope():
        x_t, x_t1 = _ensure_grad(x_t), _ensure_grad(x_t1)
        n = x_t.shape[0]
        rev = ad.grad_reverse if reverse else (lambda v: v)
        c_t = critic_apply(model, t, rev(x_t))
        c_t1 = critic_apply(model, t, rev(x_t1))
        s_t = mvwdl_weight(c_t, y_id, t, counts)
        s_t1 = mvwdl_weight(c_t1, y_id, t, counts)
        gap = ad.scale(ad.sub(ad.sum(s_t1), ad.sum(s_t)), 1.0 / n)

        interp = ad.add(ad.mul(ad.constant(xi), x_t), ad.mul(ad.constant(1.0 - xi), x_t1))
        penalty = gradient_penalty(model, t, interp)

        gap_term = ad.grad_reverse(gap) if reverse else gap
        loss = ad.add(gap_term, penalty)
        return loss, float(gap.value), float(penalty.value)


def mvwdl_loss(model: Model, e_s, y_id, rng, reverse=True):
    """Sum of per-pair Wasserstein losses over consecutive domain
    perspectives; skipped (zero, flagged) for single-row batches."""
    n = e_s.shape[0]
    if n < 2:
        log.warning("mvwdl_loss: batch of %d, skipping with zero loss", n)
        return ad.constant(0.0), {"skipped": True, "pairs": []}
    K = model.n_domains
    counts = np.bincount(np.asarray(y_id, dtype=np.int64), minlength=K)
    views = [project(model, t, e_s) for t in range(K)]
    total = None
    pairs = []
    for t in range(K - 1):
        xi = rng.uniform(size=(n, 1))
        loss_t, gap, gp = wasserstein_pair_loss(
            model, t, views[t], views[t + 1], y_id, counts, xi, reverse
        )
        total = loss_t if total is None else ad.add(total, loss_t)
        pairs.append({"t": t, "gap": gap, "penalty": gp})
    return total, {"skipped": False, "pairs": pairs}


def ocl(domain_slices):
    """Orthogonality loss: sum over domains of the squared Frobenius
    distance between the n_k-normalized cross-Gram of (E_s^k, E_d^k) and
    the identity.  Empty domain slices contribute zero."""
    total = None
    for e_s_k, e_d_k in domain_slices:
        n_k = e_s_k.shape[0]
        if n_k == 0:
            continue
        gram = ad.scale(ad.matmul(ad.transpose(e_s_k), e_d_k), 1.0 / n_k)
        dev = ad.sub(gram, ad.constant(np.eye(gram.shape[0], gram.shape[1])))
        term = ad.sum(ad.square(dev))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else ad.constant(0.0)
