"""Losses, negative sampling, Adam, and the epoch loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import PAD, DatasetSplit, WindowConfig, pad_and_window, training_pairs
from .evaluation import EvalConfig, EvalReport, evaluate, model_scorer
from .model import ModelConfig, forward, init_params, score_steps
from .regularization import DecayConfig, SseConfig, sse_apply_batch, weight_decay_grads

logger = logging.getLogger(__name__)


class SamplingError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 200
    seed: int = 0
    loss: str = "bce"
    negatives_per_positive: int = 1
    sse: SseConfig | None = field(default_factory=SseConfig)
    decay: DecayConfig = field(default_factory=DecayConfig)
    sampling_prob: float = 0.0
    eval_every: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1 or self.negatives_per_positive < 1:
            raise ValueError("batch_size and negatives_per_positive must be >= 1")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.sampling_prob <= 1.0:
            raise ValueError(f"sampling_prob must lie in [0, 1], got {self.sampling_prob}")
        if self.loss not in ("bce", "bpr"):
            raise ValueError(f"loss must be 'bce' or 'bpr', got {self.loss!r}")


# ---------------------------------------------------------------- losses


def bce_loss(pos: Tensor, neg: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over valid (step, negative) pairs of ``-[log s(r_pos) + log(1 - s(r_neg))]``."""
    terms = ad.add(ad.log_sigmoid(pos), ad.log_sigmoid(ad.scale(neg, -1.0)))
    return ad.scale(ad.masked_mean(terms, np.broadcast_to(mask, terms.shape)), -1.0)


def bpr_loss(pos: Tensor, neg: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over valid pairs of ``-log s(r_pos - r_neg)``."""
    terms = ad.log_sigmoid(ad.add(pos, ad.scale(neg, -1.0)))
    return ad.scale(ad.masked_mean(terms, np.broadcast_to(mask, terms.shape)), -1.0)


LOSSES = {"bce": bce_loss, "bpr": bpr_loss}


# ---------------------------------------------------------------- negatives


class NegativeSampler:
    """Uniform draws from the items a user never interacted with (rejection sampling)."""

    def __init__(self, histories: dict[int, set[int]], n_items: int):
        self.n_items = n_items
        self.histories = histories
        stride = n_items + 1
        keys = [u * stride + i for u, items in histories.items() for i in items]
        self._keys = np.unique(np.asarray(keys, dtype=np.int64))
        self._stride = stride

    def _seen(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        q = users * self._stride + items
        pos = np.searchsorted(self._keys, q)
        pos = np.minimum(pos, max(len(self._keys) - 1, 0))
        return (self._keys[pos] == q) if len(self._keys) else np.zeros(q.shape, dtype=bool)

    def _check(self, users) -> None:
        for u in np.unique(users):
            if len(self.histories.get(int(u), ())) >= self.n_items:
                raise SamplingError(f"user {int(u)} interacted with every item; no negatives exist")

    def sample_negative(self, user: int, rng: np.random.Generator) -> int:
        return int(self.sample(np.array([user]), rng)[0])

    def sample(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One negative per entry of ``users`` (any shape)."""
        users = np.asarray(users, dtype=np.int64)
        self._check(users)
        out = rng.integers(1, self.n_items + 1, size=users.shape)
        bad = self._seen(users, out)
        while bad.any():
            out[bad] = rng.integers(1, self.n_items + 1, size=int(bad.sum()))
            bad[bad] = self._seen(users[bad], out[bad])
        return out


# ---------------------------------------------------------------- optimizer


class Adam:
    """Bias-corrected Adam over a dict of parameter tensors."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, state: Adam) -> None:
    state.step(params)


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    users: np.ndarray       # (N,)
    inputs: np.ndarray      # (N, T)
    targets: np.ndarray     # (N, T, k) positive repeated per negative
    negatives: np.ndarray   # (N, T, k)
    mask: np.ndarray        # (N, T, k)


def make_batch(users: list[int], data: DatasetSplit, model_cfg: ModelConfig, cfg: TrainConfig,
               sampler: NegativeSampler, rng: np.random.Generator) -> Batch:
    """Windows, shift-by-one pairs, negatives and SSE-SE for a list of users.

    Inputs are right-aligned in a length-T array so the most recent input item
    sits at the last position, as it does at inference.
    """
    T, k = model_cfg.max_len, cfg.negatives_per_positive
    N = len(users)
    inputs = np.zeros((N, T), dtype=np.int64)
    targets = np.zeros((N, T), dtype=np.int64)
    mask = np.zeros((N, T), dtype=bool)
    window_cfg = WindowConfig(T, cfg.sampling_prob)
    for row, u in enumerate(users):
        window = pad_and_window(data.train[u], window_cfg, rng)
        x, y, valid = training_pairs(window)
        inputs[row, 1:], targets[row, 1:], mask[row, 1:] = x, y, valid
    u_arr = np.asarray(users, dtype=np.int64)
    neg_users = np.broadcast_to(u_arr[:, None, None], (N, T, k))
    negatives = sampler.sample(neg_users, rng)
    negatives[~np.broadcast_to(mask[:, :, None], negatives.shape)] = PAD
    targets = np.repeat(targets[:, :, None], k, axis=2)
    if cfg.sse is not None and cfg.sse.active:
        u_arr, inputs, (targets, negatives) = sse_apply_batch(
            u_arr, inputs, [targets, negatives], cfg.sse, model_cfg.n_users, model_cfg.n_items, rng)
    return Batch(u_arr, inputs, targets, negatives, np.repeat(mask[:, :, None], k, axis=2))


def batch_loss(params, model_cfg: ModelConfig, batch: Batch, loss: str = "bce",
               train: bool = True, rng: np.random.Generator | None = None) -> Tensor:
    hidden, _ = forward(batch.users, batch.inputs, params, model_cfg, train=train, rng=rng)
    pos = score_steps(hidden, batch.users, batch.targets, params, model_cfg)
    neg = score_steps(hidden, batch.users, batch.negatives, params, model_cfg)
    return LOSSES[loss](pos, neg, batch.mask)


def train_step(params, model_cfg: ModelConfig, cfg: TrainConfig, batch: Batch,
               optimizer: Adam, rng: np.random.Generator) -> float:
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = batch_loss(params, model_cfg, batch, cfg.loss, train=True, rng=rng)
    tape.backward(loss)
    touched = {"U": batch.users, "V": np.concatenate([batch.inputs.ravel(), batch.targets.ravel(),
                                                      batch.negatives.ravel()]),
               "P": np.arange(model_cfg.max_len)}
    weight_decay_grads(params, cfg.decay, touched)
    optimizer.step(params)
    return loss.item()


# ---------------------------------------------------------------- loop


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    valid_ndcg: float
    valid_recall: float
    train_seconds: float
    wall_seconds: float

    def to_line(self) -> str:
        return (f"epoch={self.epoch} train_loss={self.train_loss:.6f} "
                f"valid_ndcg10={self.valid_ndcg:.6f} valid_recall10={self.valid_recall:.6f} "
                f"wall_seconds={self.wall_seconds:.3f}")


@dataclass
class TrainResult:
    params: dict[str, Tensor]        # best-validation parameters
    last_params: dict[str, Tensor]
    config: ModelConfig
    log: list[EpochLog]
    best_epoch: int
    best_valid: EvalReport | None


def _snapshot(params):
    return {k: Tensor(p.data.copy(), requires_grad=True, name=k) for k, p in params.items()}


def train(data: DatasetSplit, model_cfg: ModelConfig, cfg: TrainConfig,
          eval_cfg: EvalConfig | None = None, on_epoch=None) -> TrainResult:
    """Fit an SSE-PT model; keep the parameters with the best validation NDCG@K.

    Each epoch visits every user with training items once, in a shuffled order.
    """
    eval_cfg = eval_cfg or EvalConfig(seed=cfg.seed)
    params = init_params(model_cfg, np.random.default_rng([cfg.seed, 0]))
    rng = np.random.default_rng([cfg.seed, 1])
    optimizer = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    sampler = NegativeSampler(data.full_history, model_cfg.n_items)
    users = np.array(sorted(u for u, seq in data.train.items() if seq), dtype=np.int64)

    best = _snapshot(params)
    best_epoch, best_report, best_score = 0, None, -np.inf
    log: list[EpochLog] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(users)
        losses, weights = [], []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [int(u) for u in order[start:start + cfg.batch_size]]
            batch = make_batch(chunk, data, model_cfg, cfg, sampler, rng)
            losses.append(train_step(params, model_cfg, cfg, batch, optimizer, rng))
            weights.append(int(batch.mask.sum()))
        train_seconds = time.perf_counter() - t0
        train_loss = float(np.average(losses, weights=weights)) if sum(weights) else 0.0

        report = None
        if data.valid and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            report = evaluate(model_scorer(params, model_cfg), data, "valid", eval_cfg,
                              model_cfg.max_len)
            if report.ndcg > best_score:
                best, best_epoch, best_report, best_score = _snapshot(params), epoch, report, report.ndcg
        entry = EpochLog(epoch, train_loss,
                         report.ndcg if report else float("nan"),
                         report.recall if report else float("nan"),
                         train_seconds, time.perf_counter() - t0)
        log.append(entry)
        logger.info(entry.to_line())
        if on_epoch is not None:
            on_epoch(entry)
    if not data.valid:
        best, best_epoch = _snapshot(params), cfg.epochs
    return TrainResult(best, params, model_cfg, log, best_epoch, best_report)
