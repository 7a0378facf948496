"""Stochastic shared embeddings (SSE-SE) and lazy L2 decay on embedding tables."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PAD


@dataclass(frozen=True)
class SseConfig:
    """Replacement probabilities: users (input and output jointly), input items, output items."""

    p_user: float = 0.0
    p_item: float = 0.0
    p_output: float = 0.0

    def __post_init__(self):
        for name in ("p_user", "p_item", "p_output"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")

    @property
    def active(self) -> bool:
        return self.p_user > 0 or self.p_item > 0 or self.p_output > 0


@dataclass(frozen=True)
class DecayConfig:
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sse_replace(index: int, table_size: int, p: float, rng: np.random.Generator) -> int:
    """With probability ``p`` swap ``index`` for a uniform draw from 1..table_size.

    The draw may return the original index. ``p == 0`` never touches the rng.
    """
    if index == PAD or not 1 <= index <= table_size:
        raise ValueError(f"index {index} outside 1..{table_size}")
    if p == 0.0 or rng.random() >= p:
        return index
    return int(rng.integers(1, table_size + 1))


def _replace_array(idx: np.ndarray, table_size: int, p: float,
                   rng: np.random.Generator) -> np.ndarray:
    if p == 0.0:
        return idx
    fire = rng.random(idx.shape) < p
    draws = rng.integers(1, table_size + 1, size=idx.shape)
    return np.where(fire & (idx != PAD), draws, idx)


def sse_apply_batch(users: np.ndarray, inputs: np.ndarray, outputs: list[np.ndarray],
                    cfg: SseConfig, n_users: int, n_items: int,
                    rng: np.random.Generator):
    """Apply SSE-SE to one training batch.

    ``users`` has one entry per example; the single replaced user index is used
    for both the input and the output user lookup. ``inputs`` are replaced per
    position with ``p_item``; every array in ``outputs`` (targets, negatives)
    per position with ``p_output``. Padding is never replaced. Draw order is
    users, inputs, then outputs in the order given.
    """
    users = _replace_array(np.asarray(users), n_users, cfg.p_user, rng)
    inputs = _replace_array(np.asarray(inputs), n_items, cfg.p_item, rng)
    outputs = [_replace_array(np.asarray(o), n_items, cfg.p_output, rng) for o in outputs]
    return users, inputs, outputs


def weight_decay_grads(params, cfg: DecayConfig, touched: dict[str, np.ndarray]) -> None:
    """Add ``weight_decay * row`` to the gradients of the embedding rows in ``touched``.

    ``touched`` maps table names (``U``, ``V``, ``P``) to row indices; padding
    row 0 of ``U`` and ``V`` is skipped. Attention and feed-forward weights
    are never decayed.
    """
    lam = cfg.weight_decay
    if lam == 0.0:
        return
    for name, rows in touched.items():
        table = params[name]
        if table.data.size == 0:
            continue
        rows = np.unique(np.asarray(rows, dtype=np.int64))
        if name in ("U", "V"):
            rows = rows[rows != PAD]
        grad = np.zeros_like(table.data) if table.grad is None else table.grad.copy()
        grad[rows] += lam * table.data[rows]
        table.grad = grad
