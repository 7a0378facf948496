"""scikit-learn style wrappers so the recommender composes with sklearn tooling.

``X`` is either a :class:`~ssept.data.DatasetSplit` or a list of per-user item
sequences (oldest first). Lists are indexed so that ``X[j]`` belongs to user
``j + 1``; ``fit`` applies the leave-last-two split itself.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import no_tape
from .data import DatasetSplit, UserSequence, left_pad, split_leave_last_two
from .evaluation import EvalConfig, EvalReport, evaluate, model_scorer, poprec_scorer
from .model import ModelConfig, forward, output_embeddings
from .regularization import DecayConfig, SseConfig
from .training import TrainConfig, train


def check_sequences(X) -> DatasetSplit:
    """Validate ``X`` and return a split."""
    if isinstance(X, DatasetSplit):
        return X
    if isinstance(X, dict):
        items = sorted(X.items())
    else:
        items = list(enumerate(X, start=1))
    seqs = []
    for user, seq in items:
        arr = np.asarray(seq)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError(f"user {user}: sequence must be a non-empty 1-D list of item ids")
        if not np.issubdtype(arr.dtype, np.integer) or arr.min() < 1:
            raise ValueError(f"user {user}: item ids must be integers >= 1 (0 is padding)")
        seqs.append(UserSequence(int(user), [int(i) for i in arr]))
    if not seqs:
        raise ValueError("no sequences given")
    return split_leave_last_two(seqs)


class SSEPTRecommender(BaseEstimator):
    """Personalized transformer for next-item ranking.

    Set ``d_user=0`` for the un-personalized ablation. ``score`` returns test
    NDCG@``k`` under sampled-candidate evaluation.
    """

    def __init__(self, d_user=50, d_item=50, max_len=50, n_blocks=2, dropout=0.2,
                 p_user=0.92, p_item=0.1, p_output=0.1, sampling_prob=0.0,
                 weight_decay=0.0, learning_rate=1e-3, beta1=0.9, beta2=0.98,
                 batch_size=128, epochs=200, loss="bce", n_negatives=1,
                 k=10, eval_negatives=100, random_state=0):
        self.d_user = d_user
        self.d_item = d_item
        self.max_len = max_len
        self.n_blocks = n_blocks
        self.dropout = dropout
        self.p_user = p_user
        self.p_item = p_item
        self.p_output = p_output
        self.sampling_prob = sampling_prob
        self.weight_decay = weight_decay
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.epochs = epochs
        self.loss = loss
        self.n_negatives = n_negatives
        self.k = k
        self.eval_negatives = eval_negatives
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.random_state,
            loss=self.loss, negatives_per_positive=self.n_negatives,
            sse=SseConfig(self.p_user if self.d_user else 0.0, self.p_item, self.p_output),
            decay=DecayConfig(self.weight_decay), sampling_prob=self.sampling_prob,
        )

    def _eval_config(self, negatives=None) -> EvalConfig:
        return EvalConfig(k=self.k, negatives=negatives or self.eval_negatives, seed=self.random_state)

    def fit(self, X, y=None):
        data = check_sequences(X)
        self.model_config_ = ModelConfig(
            n_users=data.n_users, n_items=data.n_items, d_user=self.d_user,
            d_item=self.d_item, max_len=self.max_len, n_blocks=self.n_blocks, dropout=self.dropout)
        result = train(data, self.model_config_, self._train_config(), self._eval_config())
        self.params_ = result.params
        self.history_ = result.log
        self.best_epoch_ = result.best_epoch
        self.data_ = data
        return self

    def decision_function(self, users, windows, candidates) -> np.ndarray:
        """Scores ``(N, C)`` of candidate items after each input window."""
        check_is_fitted(self, "params_")
        return model_scorer(self.params_, self.model_config_)(
            np.asarray(users), np.asarray(windows), np.asarray(candidates))

    def predict(self, users, exclude_seen: bool = True) -> np.ndarray:
        """Top-``k`` item indices per user after their full known history."""
        check_is_fitted(self, "params_")
        cfg, data = self.model_config_, self.data_
        users = np.asarray(users, dtype=np.int64)
        windows = np.stack([left_pad(self._history(u), cfg.max_len) for u in users])
        all_items = np.broadcast_to(np.arange(1, cfg.n_items + 1), (len(users), cfg.n_items))
        with no_tape():
            hidden, _ = forward(users, windows, self.params_, cfg)
            emb = output_embeddings(users, all_items, self.params_, cfg).data
        scores = np.einsum("ncd,nd->nc", emb, hidden.data[:, -1])
        if exclude_seen:
            for row, u in enumerate(users):
                seen = np.fromiter(data.full_history.get(int(u), ()), dtype=np.int64)
                scores[row, seen - 1] = -np.inf
        out = np.empty((len(users), self.k), dtype=np.int64)
        for row in range(len(users)):
            out[row] = np.lexsort((all_items[row], -scores[row]))[:self.k] + 1
        return out

    def _history(self, user: int) -> list[int]:
        d = self.data_
        if user in d.test:
            return d.train[user] + [d.valid[user], d.test[user]]
        return d.train.get(user, [])

    def evaluate(self, X=None, split="test", negatives=None) -> EvalReport:
        check_is_fitted(self, "params_")
        data = self.data_ if X is None else check_sequences(X)
        return evaluate(model_scorer(self.params_, self.model_config_), data, split,
                        self._eval_config(negatives), self.model_config_.max_len)

    def score(self, X=None, y=None) -> float:
        return self.evaluate(X).ndcg


class PopularityRecommender(BaseEstimator):
    """Ranks items by training interaction count, the same for every user."""

    def __init__(self, k=10, eval_negatives=100, max_len=50, random_state=0):
        self.k = k
        self.eval_negatives = eval_negatives
        self.max_len = max_len
        self.random_state = random_state

    def fit(self, X, y=None):
        self.data_ = check_sequences(X)
        self.scorer_ = poprec_scorer(self.data_)
        return self

    def evaluate(self, X=None, split="test", negatives=None) -> EvalReport:
        check_is_fitted(self, "scorer_")
        data = self.data_ if X is None else check_sequences(X)
        cfg = EvalConfig(k=self.k, negatives=negatives or self.eval_negatives, seed=self.random_state)
        return evaluate(self.scorer_, data, split, cfg, self.max_len)

    def score(self, X=None, y=None) -> float:
        return self.evaluate(X).ndcg
