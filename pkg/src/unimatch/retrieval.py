"""HNSW index over frozen entity representations plus model-scored greedy
retrieval, and the brute-force scorer used for exhaustive recall.

Graph edges use L2 distance between unified entity vectors; query-time
scoring uses the full model (domain tower logit per user-candidate pair).
At each layer a best-first beam keeps the top-n candidates by model score;
the per-layer beams are merged and the overall top-k returned.
"""

from __future__ import annotations

import heapq
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone
from .config import IndexConfig
from .encoder import (
    EntityCache,
    ad_network,
    embed_entities,
    encode_pairs,
    prepare_user,
    target_attention,
)
from .errors import ConfigError
from .model import Model

log = logging.getLogger(__name__)

INDEX_VERSION = 1


def entity_vectors(model: Model, cache: EntityCache, batch=2048):
    """Frozen unified entity representations (E_uee) for the whole catalog."""
    n = len(cache.id_rows)
    out = np.zeros((n, model.cfg.adnet_out))
    with ad.no_grad():
        for start in range(0, n, batch):
            ids = np.arange(start, min(start + batch, n))
            out[ids] = ad_network(model, embed_entities(model, cache, ids)).value
    return out


def score_candidates(model: Model, cache: EntityCache, ctx, candidate_ids, domain):
    """Model logit per candidate for one user context (frozen parameters)."""
    with ad.no_grad():
        rows = encode_pairs(model, cache, ctx, candidate_ids)
        logits, _, _ = backbone.domain_logits(model, rows, domain)
    return logits.value[:, 0]


class Scorer:
    """Frozen-model scorer with the catalog side precomputed once.

    Entity representations (E_uee, E_aid) do not depend on the user, so
    they are cached; per query only the user transformer, target
    attention, and the backbone run."""

    def __init__(self, model: Model, cache: EntityCache):
        self.model = model
        self.cache = cache
        self.e_uee = entity_vectors(model, cache)
        with ad.no_grad():
            self.e_aid = model.params["enc.id_table"].value[cache.id_rows].copy()

    def user_context(self, user_feats, sequence):
        with ad.no_grad():
            return prepare_user(self.model, user_feats, sequence)

    def score(self, ctx, candidate_ids, domain):
        ids = np.asarray(candidate_ids, dtype=np.int64)
        with ad.no_grad():
            e_aid = ad.constant(self.e_aid[ids])
            e_att = target_attention(ctx.seq_emb, e_aid, ctx.mask, empty=ctx.empty)
            rows = ad.concat(
                [
                    ad.constant(self.e_uee[ids]),
                    ad.broadcast_to(ctx.e_tran, (len(ids), self.model.cfg.embed_dim)),
                    e_att,
                    e_aid,
                ],
                axis=1,
            )
            logits, _, _ = backbone.domain_logits(self.model, rows, domain)
        return logits.value[:, 0]

    def score_all(self, ctx, domain):
        return self.score(ctx, np.arange(len(self.e_uee)), domain)


def brute_force_topk(model: Model, cache: EntityCache, user_feats, sequence, domain, n,
                     scorer: Scorer = None):
    """Exact top-n over the full catalog; ties broken by ascending entity id."""
    scorer = scorer or Scorer(model, cache)
    ctx = scorer.user_context(user_feats, sequence)
    scores = scorer.score_all(ctx, domain)
    order = np.lexsort((np.arange(len(scores)), -scores))
    top = order[: min(n, len(scores))]
    return top, scores[top]


@dataclass
class HnswIndex:
    """Multi-layer navigable small-world graph with L2 edges.

    Every node exists on layer 0; levels thin out geometrically up to
    n_layers - 1.  Adjacency is symmetric per layer after build repair and
    layer 0 is connected."""

    cfg: IndexConfig
    vectors: np.ndarray
    levels: np.ndarray
    layers: list  # one dict id -> sorted np.ndarray of neighbor ids per layer
    entry_point: int

    @property
    def n_layers(self):
        return self.cfg.n_layers

    def neighbors(self, layer, node):
        return self.layers[layer].get(node, _EMPTY)

    # -- l2 machinery ------------------------------------------------------

    def _dists(self, query, ids):
        diff = self.vectors[ids] - query
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def _search_layer_l2(self, query, entries, layer, ef):
        dists = self._dists(query, np.array(entries))
        visited = set(entries)
        cand = [(d, int(e)) for d, e in zip(dists, entries)]
        heapq.heapify(cand)
        best = [(-d, int(e)) for d, e in zip(dists, entries)]
        heapq.heapify(best)
        while cand:
            d, node = heapq.heappop(cand)
            if len(best) >= ef and d > -best[0][0]:
                break
            nbrs = [v for v in self.neighbors(layer, node) if v not in visited]
            if not nbrs:
                continue
            visited.update(nbrs)
            for dd, v in zip(self._dists(query, np.array(nbrs)), nbrs):
                if len(best) < ef:
                    heapq.heappush(cand, (dd, int(v)))
                    heapq.heappush(best, (-dd, int(v)))
                elif dd < -best[0][0]:
                    heapq.heappush(cand, (dd, int(v)))
                    heapq.heappushpop(best, (-dd, int(v)))
        out = sorted(((-nd, v) for nd, v in best))
        return out

    def search_l2(self, query, k, ef=None):
        """Plain L2 nearest-neighbor search (used to validate connectivity)."""
        ef = max(ef or self.cfg.ef_construction, k)
        cur = [self.entry_point]
        for layer in range(self.n_layers - 1, 0, -1):
            cur = [v for _, v in self._search_layer_l2(query, cur, layer, 1)][:1]
        found = self._search_layer_l2(query, cur, 0, ef)
        return [v for _, v in found[:k]]

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        meta = {
            "version": INDEX_VERSION,
            "n_layers": self.cfg.n_layers,
            "max_neighbors": self.cfg.max_neighbors,
            "ef_construction": self.cfg.ef_construction,
            "seed": self.cfg.seed,
            "entry_point": int(self.entry_point),
        }
        arrays = {
            "meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            "vectors": self.vectors,
            "levels": self.levels,
        }
        for layer_i, adj in enumerate(self.layers):
            nodes = np.array(sorted(adj), dtype=np.int64)
            indptr = np.zeros(len(nodes) + 1, dtype=np.int64)
            chunks = []
            for j, node in enumerate(nodes):
                chunks.append(adj[node])
                indptr[j + 1] = indptr[j] + len(adj[node])
            arrays[f"layer{layer_i}/nodes"] = nodes
            arrays[f"layer{layer_i}/indptr"] = indptr
            arrays[f"layer{layer_i}/indices"] = (
                np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
            )
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta["version"] != INDEX_VERSION:
                raise ConfigError(f"unsupported index version {meta['version']}")
            cfg = IndexConfig(
                n_layers=meta["n_layers"],
                max_neighbors=meta["max_neighbors"],
                ef_construction=meta["ef_construction"],
                seed=meta["seed"],
            )
            layers = []
            for layer_i in range(cfg.n_layers):
                nodes = data[f"layer{layer_i}/nodes"]
                indptr = data[f"layer{layer_i}/indptr"]
                indices = data[f"layer{layer_i}/indices"]
                adj = {
                    int(node): indices[indptr[j]:indptr[j + 1]].copy()
                    for j, node in enumerate(nodes)
                }
                layers.append(adj)
            return cls(
                cfg=cfg,
                vectors=data["vectors"].copy(),
                levels=data["levels"].copy(),
                layers=layers,
                entry_point=meta["entry_point"],
            )


_EMPTY = np.zeros(0, dtype=np.int64)


def _assign_levels(rng, n, n_layers, m_nb):
    ml = 1.0 / np.log(m_nb)
    u = rng.random(n)
    return np.minimum((-np.log(u) * ml).astype(np.int64), n_layers - 1)


class _Builder:
    def __init__(self, vectors, cfg):
        self.v = vectors
        self.cfg = cfg
        self.adj = [dict() for _ in range(cfg.n_layers)]
        self.entry = 0
        self.max_level = 0

    def dists(self, q, ids):
        diff = self.v[ids] - q
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def neighbors(self, layer, node):
        return self.adj[layer].get(node, _EMPTY)

    def search_layer(self, q, entries, layer, ef):
        entries = list(dict.fromkeys(entries))
        d0 = self.dists(q, np.array(entries))
        visited = set(entries)
        cand = [(d, e) for d, e in zip(d0, entries)]
        heapq.heapify(cand)
        best = [(-d, e) for d, e in zip(d0, entries)]
        heapq.heapify(best)
        while cand:
            d, node = heapq.heappop(cand)
            if len(best) >= ef and d > -best[0][0]:
                break
            nbrs = [int(x) for x in self.neighbors(layer, node) if x not in visited]
            if not nbrs:
                continue
            visited.update(nbrs)
            for dd, vtx in zip(self.dists(q, np.array(nbrs)), nbrs):
                if len(best) < ef:
                    heapq.heappush(cand, (dd, vtx))
                    heapq.heappush(best, (-dd, vtx))
                elif dd < -best[0][0]:
                    heapq.heappush(cand, (dd, vtx))
                    heapq.heappushpop(best, (-dd, vtx))
        return sorted((-nd, v) for nd, v in best)

    def connect(self, layer, a, b):
        for x, y in ((a, b), (b, a)):
            cur = self.adj[layer].get(x, _EMPTY)
            if y not in cur:
                self.adj[layer][x] = np.sort(np.append(cur, y))

    def shrink(self, layer, node):
        cap = self.cfg.max_neighbors * (2 if layer == 0 else 1)
        nbrs = self.adj[layer][node]
        if len(nbrs) <= cap:
            return
        d = self.dists(self.v[node], nbrs)
        keep = nbrs[np.lexsort((nbrs, d))[:cap]]
        dropped = set(nbrs) - set(keep)
        self.adj[layer][node] = np.sort(keep)
        # keep adjacency symmetric while pruning
        for y in dropped:
            cur = self.adj[layer].get(int(y), _EMPTY)
            self.adj[layer][int(y)] = cur[cur != node]

    def insert(self, node, level):
        q = self.v[node]
        for layer in range(level + 1):
            self.adj[layer].setdefault(node, _EMPTY)
        cur = [self.entry]
        for layer in range(self.max_level, level, -1):
            cur = [v for _, v in self.search_layer(q, cur, layer, 1)][:1]
        for layer in range(min(level, self.max_level), -1, -1):
            found = self.search_layer(q, cur, layer, self.cfg.ef_construction)
            m = self.cfg.max_neighbors * (2 if layer == 0 else 1)
            chosen = [v for _, v in found[:m]]
            for v in chosen:
                self.connect(layer, node, v)
                self.shrink(layer, v)
            cur = chosen or cur
        if level > self.max_level:
            self.max_level = level
            self.entry = node


def _repair_connectivity(builder, vectors):
    """Link stray layer-0 components to the main component (symmetric edges)."""
    n = len(vectors)
    seen = np.zeros(n, dtype=bool)
    components = []
    for start in range(n):
        if seen[start]:
            continue
        comp = [start]
        seen[start] = True
        stack = [start]
        while stack:
            x = stack.pop()
            for y in builder.neighbors(0, x):
                if not seen[y]:
                    seen[y] = True
                    comp.append(int(y))
                    stack.append(int(y))
        components.append(comp)
    if len(components) == 1:
        return 0
    components.sort(key=len, reverse=True)
    main = np.array(components[0])
    for comp in components[1:]:
        best = (np.inf, -1, -1)
        for x in comp:
            d = builder.dists(vectors[x], main)
            j = int(np.argmin(d))
            if d[j] < best[0]:
                best = (float(d[j]), x, int(main[j]))
        builder.connect(0, best[1], best[2])
    log.warning("index build: linked %d stray components on layer 0", len(components) - 1)
    return len(components) - 1


def build_index(catalog, model: Model, cache: EntityCache, cfg: IndexConfig) -> HnswIndex:
    """Deterministic HNSW build over the catalog's frozen entity vectors."""
    return build_from_vectors(entity_vectors(model, cache), cfg)


def build_from_vectors(vectors, cfg: IndexConfig) -> HnswIndex:
    cfg.validate()
    n = len(vectors)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    if n <= cfg.max_neighbors:
        log.warning("catalog of %d <= max_neighbors, building complete single layer", n)
        adj = {
            i: np.array([j for j in range(n) if j != i], dtype=np.int64) for i in range(n)
        }
        layers = [adj] + [dict() for _ in range(cfg.n_layers - 1)]
        layers[cfg.n_layers - 1][0] = _EMPTY
        return HnswIndex(
            cfg=cfg,
            vectors=vectors,
            levels=np.zeros(n, dtype=np.int64),
            layers=layers,
            entry_point=0,
        )
    levels = _assign_levels(rng, n, cfg.n_layers, cfg.max_neighbors)
    builder = _Builder(vectors, cfg)
    builder.adj[levels[0]].setdefault(0, _EMPTY)
    builder.max_level = int(levels[0])
    for layer in range(int(levels[0]) + 1):
        builder.adj[layer].setdefault(0, _EMPTY)
    for node in range(1, n):
        builder.insert(node, int(levels[node]))
    _repair_connectivity(builder, vectors)
    return HnswIndex(
        cfg=cfg,
        vectors=vectors,
        levels=levels,
        layers=builder.adj,
        entry_point=builder.entry,
    )


def _search_layer_scored(index, layer, entries, get_scores, ef, beam):
    """Best-first expansion by model score; returns {id: score} explored."""
    entries = list(dict.fromkeys(entries))
    scores = get_scores(entries)
    visited = set(entries)
    # max-heap on score with ascending-id tie break
    cand = [(-s, e) for s, e in zip(scores, entries)]
    heapq.heapify(cand)
    best = [(s, e) for s, e in zip(scores, entries)]
    heapq.heapify(best)
    result = {e: s for e, s in zip(entries, scores)}
    width = max(ef, beam)
    while cand:
        neg_s, node = heapq.heappop(cand)
        if len(best) >= width and -neg_s < best[0][0]:
            break
        nbrs = [int(x) for x in index.neighbors(layer, node) if x not in visited]
        if not nbrs:
            continue
        visited.update(nbrs)
        for s, vtx in zip(get_scores(nbrs), nbrs):
            result[vtx] = s
            if len(best) < width:
                heapq.heappush(cand, (-s, vtx))
                heapq.heappush(best, (s, vtx))
            elif s > best[0][0]:
                heapq.heappush(cand, (-s, vtx))
                heapq.heappushpop(best, (s, vtx))
    return result


def retrieve(model: Model, cache: EntityCache, index: HnswIndex, user_feats, sequence,
             domain, k_top, beam=200, ef_search=400, scorer: Scorer = None):
    """Model-scored greedy retrieval.

    Descends from the top layer keeping the top-`beam` candidates by model
    score per layer, merges the per-layer beams, and returns the overall
    top-k (score descending, ties by ascending id).
    """
    n = len(index.vectors)
    if k_top > n:
        log.warning("k_top %d exceeds catalog size %d, returning all", k_top, n)
        k_top = n
    beam = max(beam, k_top)
    scorer = scorer or Scorer(model, cache)
    ctx = scorer.user_context(user_feats, sequence)
    score_cache = {}

    def get_scores(ids):
        missing = [i for i in ids if i not in score_cache]
        if missing:
            vals = scorer.score(ctx, missing, domain)
            for i, s in zip(missing, vals):
                score_cache[i] = float(s)
        return np.array([score_cache[i] for i in ids])

    merged = {}
    cur = [index.entry_point]
    for layer in range(index.n_layers - 1, -1, -1):
        if not any(True for _ in index.layers[layer]) and layer > 0:
            continue
        found = _search_layer_scored(index, layer, cur, get_scores, ef_search, beam)
        merged.update(found)
        ranked = sorted(found.items(), key=lambda kv: (-kv[1], kv[0]))
        cur = [e for e, _ in ranked[:beam]]
    final = sorted(merged.items(), key=lambda kv: (-kv[1], kv[0]))[:k_top]
    ids = np.array([e for e, _ in final], dtype=np.int64)
    scores = np.array([s for _, s in final])
    return ids, scores
