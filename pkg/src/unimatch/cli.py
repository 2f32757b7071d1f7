"""Command-line surface: gen-data, train, eval, build-index, retrieve,
serve, ablate, dump-repr.  Configs are JSON; outputs are CSV/JSONL.

Exit codes: 0 ok, 2 config error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import harness, retrieval, serve, synthdata, trainer
from .config import fingerprint, load_config
from .encoder import EntityCache
from .errors import ConfigError, DivergenceError, SchemaError
from .model import load_checkpoint

log = logging.getLogger(__name__)


def _load_data(data_dir, data_cfg):
    catalog = synthdata.Catalog.load(os.path.join(data_dir, "catalog.json"))
    records = synthdata.read_records(os.path.join(data_dir, "records.jsonl"))
    synthdata.validate_records(records, catalog.n_domains)
    train_recs, test_recs = synthdata.split(
        records, data_cfg.split_ratio, by=data_cfg.split_by, seed=data_cfg.seed
    )
    return catalog, records, train_recs, test_recs


def cmd_gen_data(args):
    cfg = load_config(args.config)
    data_cfg = cfg["data"]
    catalog, records = synthdata.generate(data_cfg)
    os.makedirs(args.out, exist_ok=True)
    catalog.save(os.path.join(args.out, "catalog.json"))
    synthdata.write_records(os.path.join(args.out, "records.jsonl"), records)
    print(f"wrote {len(records)} records, {len(catalog)} entities to {args.out}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    catalog, _, train_recs, _ = _load_data(args.data, cfg["data"])
    os.makedirs(args.out, exist_ok=True)
    trainer.train(catalog, train_recs, cfg["model"], cfg["train"], out_dir=args.out)
    print(f"checkpoint and metrics written to {args.out}")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config)
    catalog, _, _, test_recs = _load_data(args.data, cfg["data"])
    model = load_checkpoint(args.checkpoint)
    cache = EntityCache.build(catalog, model.cfg)
    eval_cfg = cfg["eval"]
    eval_users = harness.build_eval_users(test_recs, seq_len=16, max_users=eval_cfg.eval_users)
    index = retrieval.HnswIndex.load(args.index) if args.index else None
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        domains = list(range(model.n_domains))
        w.writerow(["metric", "n"] + [f"d{k}" for k in domains] + ["average", "fingerprint"])
        for n in eval_cfg.recall_n:
            if n > len(catalog):
                continue
            rep = harness.evaluate_recall(model, cache, eval_users, n)
            w.writerow(
                [rep.metric, n]
                + [f"{rep.per_domain[k]:.6f}" for k in domains]
                + [f"{rep.average:.6f}", rep.config_fingerprint]
            )
            if index is not None:
                rep = harness.evaluate_recall(
                    model, cache, eval_users, n, method="retrieval", index=index,
                    beam=eval_cfg.beam_width, ef_search=eval_cfg.ef_search,
                )
                w.writerow(
                    [rep.metric, n]
                    + [f"{rep.per_domain[k]:.6f}" for k in domains]
                    + [f"{rep.average:.6f}", rep.config_fingerprint]
                )
    print(f"evaluation written to {args.out}")
    return 0


def cmd_build_index(args):
    cfg = load_config(args.config)
    catalog, _, _, _ = _load_data(args.data, cfg["data"])
    model = load_checkpoint(args.checkpoint)
    cache = EntityCache.build(catalog, model.cfg)
    index = retrieval.build_index(catalog, model, cache, cfg["index"])
    index.save(args.out)
    print(f"index over {len(index.vectors)} entities written to {args.out}")
    return 0


def cmd_retrieve(args):
    cfg = load_config(args.config)
    catalog, _, _, _ = _load_data(args.data, cfg["data"])
    model = load_checkpoint(args.checkpoint)
    cache = EntityCache.build(catalog, model.cfg)
    index = retrieval.HnswIndex.load(args.index)
    with open(args.user) as fh:
        user = json.load(fh)
    ids, scores = retrieval.retrieve(
        model, cache, index, user["user_feats"], user.get("sequence", []),
        args.domain, k_top=args.topk,
        beam=cfg["eval"].beam_width, ef_search=cfg["eval"].ef_search,
    )
    print(json.dumps({
        "ids": [int(i) for i in ids],
        "scores": [float(s) for s in scores],
        "classes": [catalog.classes[int(i)] for i in ids],
    }))
    return 0


def cmd_serve(args):
    cfg = load_config(args.config)
    catalog, _, _, _ = _load_data(args.data, cfg["data"])
    model = load_checkpoint(args.checkpoint)
    index = retrieval.HnswIndex.load(args.index)
    server = serve.MatchingServer(model, catalog, index, host=args.host, port=args.port)
    host, port = server.address
    print(f"serving on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


def cmd_ablate(args):
    cfg = load_config(args.config)
    catalog, _, train_recs, test_recs = _load_data(args.data, cfg["data"])
    seeds = tuple(int(s) for s in args.seeds.split(","))
    results = harness.ablate(
        catalog, train_recs, test_recs, cfg["model"], cfg["train"], cfg["eval"],
        seeds=seeds, recall_n=args.recall_n,
    )
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    harness.write_ablation_csv(args.out, results)
    for name, row in results.items():
        if row["status"] == "ok":
            print(f"{name}: avg={row['average']:.4f} rel={row.get('relative_change', 0.0):+.2f}%")
        else:
            print(f"{name}: FAILED")
    return 0


def cmd_dump_repr(args):
    cfg = load_config(args.config)
    catalog, _, _, test_recs = _load_data(args.data, cfg["data"])
    model = load_checkpoint(args.checkpoint)
    cache = EntityCache.build(catalog, model.cfg)
    sample = test_recs[: args.sample]
    harness.dump_representations(model, cache, sample, args.out)
    print(f"dumped {len(sample)} records to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="unimatch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recall evaluation")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("build-index", help="build the HNSW index")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("retrieve", help="top-k retrieval for one user")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--user", required=True, help="JSON file with user_feats and sequence")
    p.add_argument("--domain", type=int, required=True)
    p.add_argument("--topk", type=int, default=10)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("serve", help="run the retrieval endpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7654)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("ablate", help="run the five-row ablation matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--recall-n", type=int, default=50)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-repr", help="dump shared representations and projections")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample", type=int, default=200)
    p.set_defaults(func=cmd_dump_repr)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
