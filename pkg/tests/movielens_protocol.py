"""Desk-scale MovieLens protocol shared by the acceptance suite and ad-hoc runs.

Subsample users, train the personalized model and PopRec on the same
leave-last-two split, and evaluate at several negative-candidate counts.
"""
from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from ssept.data import build_sequences, load_interactions, split_leave_last_two
from ssept.evaluation import EvalConfig, evaluate, model_scorer, poprec_scorer
from ssept.model import ModelConfig
from ssept.regularization import SseConfig
from ssept.training import TrainConfig, train

logger = logging.getLogger(__name__)


def load_subsample(path, n_users=1000, seed=0):
    report = load_interactions(path, delimiter="::")
    users = sorted({r.user for r in report.records}, key=lambda u: (len(u), u))
    if len(users) > n_users:
        keep = set(np.random.default_rng(seed).choice(users, size=n_users, replace=False).tolist())
        records = [r for r in report.records if r.user in keep]
    else:
        records = report.records
    seqs, maps = build_sequences(records)
    return split_leave_last_two(seqs, maps.n_users, maps.n_items), seqs, len(users)


@dataclass
class Run:
    max_len: int
    sampling_prob: float
    seconds: float
    epoch_train_seconds: list[float]
    ndcg: dict[int, float] = field(default_factory=dict)
    recall: dict[int, float] = field(default_factory=dict)
    skipped: dict[int, int] = field(default_factory=dict)

    @property
    def median_epoch_seconds(self) -> float:
        return statistics.median(self.epoch_train_seconds)


def train_and_score(data, max_len, sampling_prob=0.0, epochs=100, negatives=(100,), seed=0,
                    learning_rate=0.005) -> Run:
    cfg = ModelConfig(data.n_users, data.n_items, d_user=25, d_item=25, max_len=max_len,
                      n_blocks=1, dropout=0.2)
    tc = TrainConfig(learning_rate=learning_rate, epochs=epochs, seed=seed, sampling_prob=sampling_prob,
                     sse=SseConfig(0.92, 0.1, 0.1))
    t0 = time.perf_counter()
    result = train(data, cfg, tc, EvalConfig(k=10, negatives=100, seed=seed))
    seconds = time.perf_counter() - t0
    run = Run(max_len, sampling_prob, seconds, [e.train_seconds for e in result.log])
    scorer = model_scorer(result.params, cfg)
    for c in negatives:
        rep = evaluate(scorer, data, "test", EvalConfig(k=10, negatives=c, seed=seed), max_len)
        run.ndcg[c], run.recall[c], run.skipped[c] = rep.ndcg, rep.recall, rep.skipped
    return run


def poprec_ndcg(data, max_len=50, seed=0) -> float:
    return evaluate(poprec_scorer(data), data, "test", EvalConfig(k=10, negatives=100, seed=seed),
                    max_len).ndcg
