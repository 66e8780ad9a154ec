"""scikit-learn style wrapper around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .backbone import predict
from .encoding import FieldSchema
from .trainer import VARIANTS, TrainConfig, TrainData, train


class ADSNetRegressor(RegressorMixin, BaseEstimator):
    """LTV regressor over integer-coded categorical features.

    ``fit`` accepts an optional ``sample_domain`` array; rows with a negative
    value are treated as external-domain samples, all others as internal.
    ``predict`` returns expected LTV and ``predict_proba`` returns the
    purchase probability as two columns (no purchase, purchase).
    """

    def __init__(self, variant="adsnet", vocab_sizes=None, warmup_steps=1000, total_steps=3000,
                 sync_frequency=500, batch_size=512, external_microbatch=64, beta=0.1,
                 lr_dense=5e-3, lr_sparse=1e-2, k_segments=8, k_experts=4, embedding_dim=32,
                 expert_hidden=(128, 64), tower_hidden=32, random_state=0):
        self.variant = variant
        self.vocab_sizes = vocab_sizes
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.sync_frequency = sync_frequency
        self.batch_size = batch_size
        self.external_microbatch = external_microbatch
        self.beta = beta
        self.lr_dense = lr_dense
        self.lr_sparse = lr_sparse
        self.k_segments = k_segments
        self.k_experts = k_experts
        self.embedding_dim = embedding_dim
        self.expert_hidden = expert_hidden
        self.tower_hidden = tower_hidden
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            warmup_steps=self.warmup_steps, total_steps=self.total_steps,
            sync_frequency=self.sync_frequency, batch_size=self.batch_size,
            external_microbatch=self.external_microbatch, beta=self.beta,
            lr_dense=self.lr_dense, lr_sparse=self.lr_sparse, seed=int(self.random_state or 0),
            k_segments=self.k_segments, k_experts=self.k_experts,
            embedding_dim=self.embedding_dim, expert_hidden=tuple(self.expert_hidden),
            tower_hidden=self.tower_hidden)

    def fit(self, X, y, sample_domain=None):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        X = check_array(X, dtype=np.int64)
        y = check_array(y, ensure_2d=False, dtype=np.float64)
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if np.any(y < 0):
            raise ValueError("y must be >= 0")
        if np.any(X < 0):
            raise ValueError("feature ids must be >= 0")
        if sample_domain is None:
            external = np.zeros(len(y), dtype=bool)
        else:
            external = np.asarray(sample_domain).reshape(-1) < 0
            if external.shape[0] != X.shape[0]:
                raise ValueError("sample_domain must have one entry per row")
        if external.all():
            raise ValueError("at least one internal-domain sample is required")
        vocab = self.vocab_sizes
        if vocab is None:
            vocab = tuple(int(v) + 1 for v in X.max(axis=0))
        elif len(vocab) != X.shape[1]:
            raise ValueError(f"vocab_sizes has {len(vocab)} entries for {X.shape[1]} columns")
        schema = FieldSchema.from_vocab(vocab, self.embedding_dim)
        schema.check_ids(X)
        internal = TrainData(X[~external], y[~external])
        ext = TrainData(X[external], y[external]) if external.any() else None
        result = train(schema, internal, ext, self._config(), self.variant)
        self.schema_ = schema
        self.result_ = result
        self.n_features_in_ = X.shape[1]
        self.metrics_log_ = result.reports
        return self

    def _scores(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=np.int64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        self.schema_.check_ids(X)
        r = self.result_
        return predict(r.model, r.arch, r.scheme, X)

    def predict(self, X):
        return self._scores(X)[1]

    def predict_proba(self, X):
        p = self._scores(X)[0]
        return np.column_stack([1.0 - p, p])
