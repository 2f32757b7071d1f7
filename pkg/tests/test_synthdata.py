import json
from collections import Counter

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from unimatch import synthdata
from unimatch.config import DataConfig
from unimatch.errors import ConfigError, SchemaError


def small_config(**kw):
    base = dict(
        seed=11,
        n_users=60,
        entity_counts={"A": 120, "B": 12, "C": 4, "D": 10},
        records_per_domain=150,
        n_domains=4,
    )
    base.update(kw)
    return DataConfig(**base)


class TestGenerate:
    def test_deterministic_byte_identical(self, tmp_path):
        cfg = small_config()
        _, r1 = synthdata.generate(cfg)
        _, r2 = synthdata.generate(cfg)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        synthdata.write_records(p1, r1)
        synthdata.write_records(p2, r2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_degenerate_signal_uniform(self):
        cfg = small_config(
            seed=3,
            invariant_weight=0.0,
            specific_weight=0.0,
            click_bias=0.0,
            noise=0.0,
            entity_counts={"A": 10, "B": 4, "C": 3, "D": 3},
            records_per_domain=2000,
        )
        _, records = synthdata.generate(cfg)
        counts = Counter(r["target_id"] for r in records)
        n = len(records)
        t = sum(cfg.entity_counts.values())
        p = 1.0 / t
        sigma = np.sqrt(n * p * (1 - p))
        for eid in range(t):
            assert abs(counts.get(eid, 0) - n * p) < 3 * sigma

    def test_class_skew(self):
        _, records = synthdata.generate(small_config())
        shares = Counter(r["target_class"] for r in records)
        assert all(shares["A"] > shares[c] for c in "BCD")

    def test_desk_scale_default_counts(self):
        cfg = DataConfig()
        assert cfg.entity_counts == {"A": 5000, "B": 80, "C": 8, "D": 70}

    def test_zero_entities_rejected(self):
        with pytest.raises(ConfigError):
            synthdata.generate(small_config(entity_counts={"A": 0, "B": 1, "C": 1, "D": 1}))

    def test_ids_unique_and_classes_match(self):
        catalog, records = synthdata.generate(small_config())
        assert len(set(catalog.ids.tolist())) == len(catalog)
        for r in records[:50]:
            assert r["target_class"] == catalog.classes[r["target_id"]]
            assert r["domain"] < 4
            assert r["label"] == 1

    def test_sequences_are_cross_domain(self):
        _, records = synthdata.generate(small_config(records_per_domain=400))
        by_user = {}
        cross = False
        for r in records:
            if len(r["sequence"]) >= 2:
                doms = set()
                for eid, _cls in r["sequence"]:
                    for r2 in records:
                        if r2["target_id"] == eid and r2["user_id"] == r["user_id"]:
                            doms.add(r2["domain"])
                            break
                if len(doms) > 1:
                    cross = True
                    break
        assert cross

    def test_planted_signal_recoverable_by_probe(self):
        cfg = small_config(records_per_domain=400)
        z_user, z_user_k, z_ent, z_ent_k, _ = synthdata.planted_latents(cfg)
        _, records = synthdata.generate(cfg)
        rng = np.random.default_rng(2)
        feats, labels = [], []
        for r in records:
            u, a, k = r["user_id"], r["target_id"], r["domain"]
            feats.append([z_user[u] @ z_ent[a], z_user_k[k, u] @ z_ent_k[k, a]])
            labels.append(1)
            nu = rng.integers(cfg.n_users)
            na = rng.integers(len(z_ent))
            nk = rng.integers(cfg.n_domains)
            feats.append([z_user[nu] @ z_ent[na], z_user_k[nk, nu] @ z_ent_k[nk, na]])
            labels.append(0)
        X, y = np.array(feats), np.array(labels)
        probe = LogisticRegression().fit(X, y)
        auc = roc_auc_score(y, probe.decision_function(X))
        assert auc > 0.8


class TestUnify:
    def test_missing_field_filled(self):
        catalog, records = synthdata.generate(small_config())
        rec_b = next(r for r in records if r["target_class"] == "B")
        assert "brand_tier" not in rec_b["entity_feats"]
        uni = synthdata.unify(rec_b, catalog.schema)
        assert uni["entity_feats"]["brand_tier"] == synthdata.MISSING
        assert uni["entity_feats"]["shop_age"] == rec_b["entity_feats"]["shop_age"]

    def test_complete_record_unchanged(self):
        catalog, records = synthdata.generate(small_config())
        rec = synthdata.unify(records[0], catalog.schema)
        again = synthdata.unify(rec, catalog.schema)
        assert again["entity_feats"] == rec["entity_feats"]

    def test_idempotent_and_schema_closed(self):
        catalog, records = synthdata.generate(small_config())
        names = None
        for r in records[:200]:
            uni = synthdata.unify(r, catalog.schema)
            keys = tuple(uni["entity_feats"].keys())
            if names is None:
                names = keys
            assert keys == names
            assert synthdata.unify(uni, catalog.schema) == uni

    def test_unknown_class_rejected(self):
        catalog, records = synthdata.generate(small_config())
        bad = dict(records[0], target_class="Z")
        with pytest.raises(SchemaError):
            synthdata.unify(bad, catalog.schema)

    def test_dense_default_is_zero(self):
        schema = synthdata.build_schema(4)
        dense = [f for f in schema.fields if f.kind == "dense"]
        assert dense and all(f.default == 0.0 for f in dense)


class TestSplit:
    def test_ratio_sizes(self):
        records = [{"user_id": i, "domain": i % 4, "pos": i} for i in range(100)]
        train, test = synthdata.split(records, 0.8, by="time")
        assert len(train) == 80 and len(test) == 20

    def test_deterministic(self):
        _, records = synthdata.generate(small_config())
        a = synthdata.split(records, 0.8, by="user", seed=4)
        b = synthdata.split(records, 0.8, by="user", seed=4)
        assert [r["pos"] for r in a[0]] == [r["pos"] for r in b[0]]

    def test_user_disjoint(self):
        _, records = synthdata.generate(small_config())
        train, test = synthdata.split(records, 0.8, by="user", seed=4)
        assert not ({r["user_id"] for r in train} & {r["user_id"] for r in test})

    def test_default_config_domains_nonempty(self):
        _, records = synthdata.generate(small_config())
        train, test = synthdata.split(records, 0.8, by="user", seed=0)
        for part in (train, test):
            assert set(Counter(r["domain"] for r in part)) == {0, 1, 2, 3}

    def test_bad_ratio(self):
        with pytest.raises(ConfigError):
            synthdata.split([], 1.5)


class TestPersistence:
    def test_jsonl_roundtrip(self, tmp_path):
        _, records = synthdata.generate(small_config())
        path = tmp_path / "records.jsonl"
        synthdata.write_records(path, records)
        back = synthdata.read_records(path)
        assert back == [{k: r[k] for k in back[0]} for r in records]

    def test_catalog_roundtrip(self, tmp_path):
        catalog, _ = synthdata.generate(small_config())
        path = tmp_path / "catalog.json"
        catalog.save(path)
        back = synthdata.Catalog.load(path)
        assert back.classes == catalog.classes
        assert back.feats == catalog.feats
        np.testing.assert_array_equal(back.z_inv, catalog.z_inv)
        assert [f.name for f in back.schema.fields] == [
            f.name for f in catalog.schema.fields
        ]
