"""Scikit-learn style facade over the matching model.

`UnifiedMatcher` exposes the train/retrieve cycle as fit/predict with
`get_params`/`set_params` from BaseEstimator, so the matcher composes with
the wider ecosystem (cloning, grid search over its hyperparameters).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .config import EvalConfig, IndexConfig, ModelConfig, TrainConfig
from .encoder import EntityCache
from .errors import ConfigError
from . import retrieval, synthdata, trainer


class UnifiedMatcher(BaseEstimator):
    """Multi-domain matching model with sampled-softmax training.

    Parameters mirror the model/train configs; `fit` consumes interaction
    records plus the entity catalog, `predict` returns top-k entity ids
    for user contexts.
    """

    def __init__(
        self,
        embed_dim=16,
        expert_hidden=(256, 128, 64),
        tower_hidden=(128, 64),
        adnet_out=16,
        lr=0.03,
        batch_size=48,
        epochs=3,
        negatives=4,
        seed=0,
        use_dal=True,
        use_mvwdl=True,
        use_ocl=True,
        use_uwl=True,
        fixed_aux_weight=0.01,
        top_k=10,
    ):
        self.embed_dim = embed_dim
        self.expert_hidden = expert_hidden
        self.tower_hidden = tower_hidden
        self.adnet_out = adnet_out
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.negatives = negatives
        self.seed = seed
        self.use_dal = use_dal
        self.use_mvwdl = use_mvwdl
        self.use_ocl = use_ocl
        self.use_uwl = use_uwl
        self.fixed_aux_weight = fixed_aux_weight
        self.top_k = top_k

    def _model_config(self):
        return ModelConfig(
            embed_dim=self.embed_dim,
            expert_hidden=tuple(self.expert_hidden),
            tower_hidden=tuple(self.tower_hidden),
            adnet_out=self.adnet_out,
        ).validate()

    def _train_config(self):
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            negatives=self.negatives,
            seed=self.seed,
            use_dal=self.use_dal,
            use_mvwdl=self.use_mvwdl,
            use_ocl=self.use_ocl,
            use_uwl=self.use_uwl,
            fixed_aux_weight=self.fixed_aux_weight,
        ).validate()

    def fit(self, records, y=None, *, catalog):
        """Train on interaction records against an entity catalog."""
        synthdata.validate_records(records, catalog.n_domains, catalog.schema)
        self.model_, self.metrics_ = trainer.train(
            catalog, records, self._model_config(), self._train_config()
        )
        self.catalog_ = catalog
        self.cache_ = EntityCache.build(catalog, self.model_.cfg)
        self.index_ = None
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigError("matcher is not fitted; call fit(records, catalog=...) first")

    def build_index(self, index_config=None):
        """Build the HNSW index over the trained entity representations."""
        self._check_fitted()
        self.index_ = retrieval.build_index(
            self.catalog_, self.model_, self.cache_, index_config or IndexConfig()
        )
        return self.index_

    def score_candidates(self, user_context, candidate_ids, domain):
        self._check_fitted()
        from .encoder import prepare_user
        from . import autodiff as ad

        with ad.no_grad():
            ctx = prepare_user(
                self.model_, user_context["user_feats"], user_context.get("sequence", [])
            )
        return retrieval.score_candidates(self.model_, self.cache_, ctx, candidate_ids, domain)

    def predict(self, X):
        """Top-k entity ids for each user context in X.

        Each context is a dict with user_feats, sequence, and domain.
        Brute-force scoring unless an index has been built.
        """
        self._check_fitted()
        single = isinstance(X, dict)
        contexts = [X] if single else list(X)
        out = []
        for ctx in contexts:
            if self.index_ is not None:
                ids, _ = retrieval.retrieve(
                    self.model_, self.cache_, self.index_,
                    ctx["user_feats"], ctx.get("sequence", []), ctx["domain"],
                    k_top=self.top_k,
                )
            else:
                ids, _ = retrieval.brute_force_topk(
                    self.model_, self.cache_,
                    ctx["user_feats"], ctx.get("sequence", []), ctx["domain"], self.top_k,
                )
            out.append(ids)
        return out[0] if single else np.array(out)
