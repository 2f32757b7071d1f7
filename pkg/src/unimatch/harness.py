"""Evaluation harness: recall metrics, the ablation matrix, and
representation dumps for external plotting."""

from __future__ import annotations

import csv
import dataclasses
import logging
from collections import defaultdict
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from . import backbone, retrieval, rrl, trainer
from .config import EvalConfig, ModelConfig, TrainConfig, fingerprint
from .encoder import EntityCache, encode_pairs, prepare_user
from .errors import DivergenceError
from .model import Model

log = logging.getLogger(__name__)


def recall_value(ground_truth, retrieved):
    """|G ∩ R| / |G| in exact rational arithmetic."""
    g = set(ground_truth)
    if not g:
        raise ValueError("recall: empty ground truth (caller must skip)")
    return Fraction(len(g & set(retrieved)), len(g))


def recall_all(ground_truth, brute_force_ids):
    return recall_value(ground_truth, brute_force_ids)


def recall_retrieval(ground_truth, retrieved_ids):
    return recall_value(ground_truth, retrieved_ids)


def build_eval_users(test_records, seq_len, max_users=None):
    """Per-user evaluation contexts from held-out records.

    The first half of a user's held-out stream provides the behavior
    context; targets from the second half are the per-domain ground truth.
    """
    by_user = defaultdict(list)
    for r in test_records:
        by_user[r["user_id"]].append(r)
    users = []
    for uid in sorted(by_user):
        recs = sorted(by_user[uid], key=lambda r: r["pos"])
        if len(recs) < 2:
            continue
        cut = max(1, len(recs) // 2)
        context, future = recs[:cut], recs[cut:]
        sequence = [[r["target_id"], r["target_class"]] for r in context][-seq_len:]
        truth = defaultdict(set)
        for r in future:
            truth[r["domain"]].add(r["target_id"])
        if not truth:
            continue
        users.append(
            {
                "user_id": uid,
                "user_feats": recs[0]["user_feats"],
                "sequence": sequence,
                "truth": {k: v for k, v in truth.items()},
            }
        )
        if max_users and len(users) >= max_users:
            break
    return users


@dataclasses.dataclass
class EvalReport:
    """Per-domain and average recall for one model at one cutoff."""

    metric: str
    n: int
    per_domain: dict
    average: float
    evaluated: dict
    skipped: dict
    config_fingerprint: str
    seed: int


def _aggregate(per_domain_values, n_domains):
    per_domain = {}
    evaluated, skipped = {}, {}
    for k in range(n_domains):
        vals = per_domain_values.get(k, [])
        evaluated[k] = len(vals)
        skipped[k] = 0
        per_domain[k] = float(sum(vals) / len(vals)) if vals else float("nan")
    present = [v for v in per_domain.values() if not np.isnan(v)]
    average = float(np.mean(present)) if present else float("nan")
    return per_domain, average, evaluated


def evaluate_recall(model: Model, cache: EntityCache, eval_users, n, method="all",
                    index=None, beam=200, ef_search=400, seed=0, scorer=None):
    """Recall-all@n (brute force) or Recall-retrieval@n (graph index)."""
    scorer = scorer or retrieval.Scorer(model, cache)
    per_domain = defaultdict(list)
    skipped = defaultdict(int)
    for user in eval_users:
        for k, truth in user["truth"].items():
            if not truth:
                skipped[k] += 1
                continue
            if method == "all":
                ids, _ = retrieval.brute_force_topk(
                    model, cache, user["user_feats"], user["sequence"], k, n,
                    scorer=scorer,
                )
            else:
                ids, _ = retrieval.retrieve(
                    model, cache, index, user["user_feats"], user["sequence"], k,
                    k_top=n, beam=beam, ef_search=ef_search, scorer=scorer,
                )
            per_domain[k].append(recall_value(truth, ids.tolist()))
    agg, average, evaluated = _aggregate(per_domain, model.n_domains)
    return EvalReport(
        metric="Recall-all" if method == "all" else "Recall-retrieval",
        n=n,
        per_domain=agg,
        average=average,
        evaluated=evaluated,
        skipped=dict(skipped),
        config_fingerprint=fingerprint(model.cfg),
        seed=seed,
    )


def relative_change(candidate, baseline):
    """(candidate - baseline) / baseline, as a percentage."""
    if baseline == 0:
        return float("nan")
    return 100.0 * (candidate - baseline) / baseline


ABLATION_ROWS = (
    ("Backbone", dict(use_dal=False, use_mvwdl=False, use_ocl=False, use_uwl=False)),
    ("Backbone&DAL", dict(use_dal=True, use_mvwdl=False, use_ocl=True, use_uwl=False)),
    ("Backbone&DAL&UWL", dict(use_dal=True, use_mvwdl=False, use_ocl=True, use_uwl=True)),
    ("Backbone&MVWDL", dict(use_dal=False, use_mvwdl=True, use_ocl=True, use_uwl=False)),
    ("Backbone&RRL", dict(use_dal=True, use_mvwdl=True, use_ocl=True, use_uwl=True)),
)


def ablate(catalog, train_records, test_records, model_cfg: ModelConfig,
           train_cfg: TrainConfig, eval_cfg: EvalConfig, seeds=(0,), recall_n=50):
    """Train and evaluate the five toggle combinations on shared data.

    Returns {row_name: {"status", "per_seed": [...], "average", "per_domain",
    "relative_change"}}; the orthogonality loss rides along with every
    robust-representation variant.  A diverging run marks its row failed
    without stopping the others.
    """
    eval_users = build_eval_users(
        test_records, seq_len=16, max_users=eval_cfg.eval_users
    )
    results = {}
    for name, toggles in ABLATION_ROWS:
        per_seed, per_domain_acc = [], defaultdict(list)
        status = "ok"
        for seed in seeds:
            cfg = dataclasses.replace(train_cfg, seed=seed, **toggles)
            try:
                model, _ = trainer.train(catalog, train_records, model_cfg, cfg)
            except DivergenceError as exc:
                log.warning("ablation row %s seed %d diverged: %s", name, seed, exc)
                status = "failed"
                break
            cache = EntityCache.build(catalog, model.cfg)
            report = evaluate_recall(model, cache, eval_users, recall_n, seed=seed)
            per_seed.append(report.average)
            for k, v in report.per_domain.items():
                per_domain_acc[k].append(v)
        if status == "failed" or not per_seed:
            results[name] = {"status": "failed", "per_seed": per_seed}
            continue
        results[name] = {
            "status": "ok",
            "per_seed": per_seed,
            "average": float(np.mean(per_seed)),
            "per_domain": {k: float(np.mean(v)) for k, v in per_domain_acc.items()},
        }
    base = results.get("Backbone", {})
    base_avg = base.get("average")
    base_domains = base.get("per_domain", {})
    for name, row in results.items():
        if row["status"] != "ok" or base_avg is None:
            continue
        row["relative_change"] = relative_change(row["average"], base_avg)
        row["relative_change_per_domain"] = {
            k: relative_change(row["per_domain"][k], base_domains[k])
            for k in row["per_domain"]
            if k in base_domains and not np.isnan(base_domains[k])
        }
    return results


def write_ablation_csv(path, results):
    domains = sorted(
        next(r for r in results.values() if r["status"] == "ok")["per_domain"]
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["method", "status"]
            + [f"recall_d{k}" for k in domains]
            + ["recall_avg"]
            + [f"relchange_d{k}_pct" for k in domains]
            + ["relchange_avg_pct"]
        )
        for name, row in results.items():
            if row["status"] != "ok":
                w.writerow([name, row["status"]] + [""] * (2 * len(domains) + 2))
                continue
            rel = row.get("relative_change_per_domain", {})
            w.writerow(
                [name, row["status"]]
                + [f"{row['per_domain'][k]:.6f}" for k in domains]
                + [f"{row['average']:.6f}"]
                + [f"{rel.get(k, float('nan')):.4f}" for k in domains]
                + [f"{row.get('relative_change', float('nan')):.4f}"]
            )


def dump_representations(model: Model, cache: EntityCache, records, path):
    """CSV of shared representations and their per-perspective projections.

    One E_s row plus one row per projection for every record; every row
    carries its domain id.  Row count = len(records) * (1 + n_domains).
    """
    dim = model.expert_out
    proj_dim = model.cfg.projection_dim
    width = max(dim, proj_dim)
    with ad.no_grad(), open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "perspective", "domain", "user_id"] + [f"v{i}" for i in range(width)])
        for rec in records:
            ctx = prepare_user(model, rec["user_feats"], rec["sequence"])
            rows = encode_pairs(model, cache, ctx, [rec["target_id"]])
            e_s = backbone.shared_expert(model, rows)
            base = e_s.value[0]
            w.writerow(
                ["E_s", -1, rec["domain"], rec["user_id"]]
                + [repr(float(x)) for x in base]
                + [""] * (width - dim)
            )
            for t in range(model.n_domains):
                proj = rrl.project(model, t, e_s).value[0]
                w.writerow(
                    ["E_p", t, rec["domain"], rec["user_id"]]
                    + [repr(float(x)) for x in proj]
                    + [""] * (width - proj_dim)
                )
