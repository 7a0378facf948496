"""Sampled-candidate ranking evaluation: NDCG@K and Recall@K.

Each evaluated user contributes one ranked list: the held-out positive plus
``C`` distinct negatives drawn uniformly from items outside the user's whole
history. Ties in score are broken by ascending item index.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import DatasetSplit, left_pad
from .model import ModelConfig, score_candidates

logger = logging.getLogger(__name__)

# scorer(users (N,), windows (N, T), candidates (N, C+1)) -> scores (N, C+1)
Scorer = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    negatives: int = 100
    seed: int = 0
    batch_users: int = 256

    def __post_init__(self):
        if self.k < 1 or self.negatives < 1:
            raise ValueError(f"need k >= 1 and negatives >= 1, got {self.k}, {self.negatives}")


@dataclass
class RankedList:
    items: np.ndarray   # candidates by descending score
    rank: int           # 1-based position of the positive


@dataclass
class EvalReport:
    ndcg: float
    recall: float
    users: int
    k: int
    negatives: int
    skipped: int = 0
    per_user: list[tuple[int, int, float, int]] = field(default_factory=list)

    def to_text(self) -> str:
        return (f"split_users = {self.users}\n"
                f"skipped_users = {self.skipped}\n"
                f"k = {self.k}\n"
                f"negatives = {self.negatives}\n"
                f"ndcg_at_{self.k} = {self.ndcg!r}\n"
                f"recall_at_{self.k} = {self.recall!r}\n")

    def per_user_csv(self) -> str:
        lines = ["user,rank,ndcg,recall"]
        lines += [f"{u},{r},{n!r},{h}" for u, r, n, h in self.per_user]
        return "\n".join(lines) + "\n"


def user_rng(seed: int, user: int) -> np.random.Generator:
    """Independent stream per (seed, user), so results do not depend on batching."""
    return np.random.default_rng([seed, user])


def sample_candidates(positive: int, history: set[int], n_items: int, negatives: int,
                      rng: np.random.Generator) -> np.ndarray | None:
    """``[positive, neg_1, ..., neg_C]`` or None when fewer than C negatives exist."""
    pool = np.setdiff1d(np.arange(1, n_items + 1), np.fromiter(history | {positive}, dtype=np.int64))
    if pool.size < negatives:
        return None
    negs = rng.choice(pool, size=negatives, replace=False)
    return np.concatenate([[positive], negs]).astype(np.int64)


def rank_candidates(scores, items, positive: int) -> RankedList:
    """Sort by descending score, ascending item index on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    items = np.asarray(items, dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("cannot rank non-finite scores")
    order = np.lexsort((items, -scores))
    ranked = items[order]
    return RankedList(ranked, int(np.flatnonzero(ranked == positive)[0]) + 1)


def positive_ranks(scores: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Rank of column 0 in each row under the same ordering as :func:`rank_candidates`."""
    pos_s = scores[:, :1]
    pos_i = items[:, :1]
    ahead = (scores > pos_s) | ((scores == pos_s) & (items < pos_i))
    return 1 + ahead[:, 1:].sum(axis=1)


def ndcg_at_k(rank: int, k: int) -> float:
    """Single-positive NDCG: ``1 / log2(rank + 1)`` inside the top k, else 0."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def recall_at_k(rank: int, k: int) -> int:
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    return int(rank <= k)


def evaluate(scorer: Scorer, data: DatasetSplit, split: str, cfg: EvalConfig,
             max_len: int, keep_per_user: bool = False) -> EvalReport:
    """Rank each eligible user's held-out item of ``split`` against sampled negatives.

    The input window holds the items preceding the held-out one (train for
    ``valid``; train plus the validation item for ``test``).
    """
    held = data.valid if split == "valid" else data.test
    if split not in ("valid", "test"):
        raise ValueError(f"split must be 'valid' or 'test', got {split!r}")
    rows = []
    skipped = 0
    for u in sorted(held):
        cands = sample_candidates(held[u], data.full_history[u], data.n_items,
                                  cfg.negatives, user_rng(cfg.seed, u))
        if cands is None:
            skipped += 1
            continue
        rows.append((u, left_pad(data.history_before(u, split), max_len), cands))
    if skipped:
        logger.warning("%d users skipped: fewer than %d negative candidates", skipped, cfg.negatives)

    ndcgs, hits, per_user = [], [], []
    for start in range(0, len(rows), cfg.batch_users):
        chunk = rows[start:start + cfg.batch_users]
        users = np.array([r[0] for r in chunk], dtype=np.int64)
        windows = np.stack([r[1] for r in chunk])
        cands = np.stack([r[2] for r in chunk])
        scores = np.asarray(scorer(users, windows, cands), dtype=np.float64)
        if not np.all(np.isfinite(scores)):
            raise FloatingPointError("scorer produced non-finite scores")
        for u, rank in zip(users, positive_ranks(scores, cands)):
            n, h = ndcg_at_k(int(rank), cfg.k), recall_at_k(int(rank), cfg.k)
            ndcgs.append(n)
            hits.append(h)
            if keep_per_user:
                per_user.append((int(u), int(rank), n, h))
    count = len(ndcgs)
    return EvalReport(
        ndcg=math.fsum(ndcgs) / count if count else 0.0,
        recall=sum(hits) / count if count else 0.0,
        users=count, k=cfg.k, negatives=cfg.negatives, skipped=skipped, per_user=per_user,
    )


def poprec_scorer(data: DatasetSplit) -> Scorer:
    """Score = number of training interactions with the item."""
    counts = np.zeros(data.n_items + 1)
    for item, c in Counter(i for seq in data.train.values() for i in seq).items():
        counts[item] = c

    def scorer(users, windows, candidates):
        return counts[candidates]

    return scorer


def model_scorer(params, cfg: ModelConfig) -> Scorer:
    def scorer(users, windows, candidates):
        return score_candidates(users, windows, candidates, params, cfg)

    return scorer
