import math
from collections import Counter

import numpy as np
import pytest

from ssept import autodiff as ad
from ssept.autodiff import Tape, Tensor
from ssept.data import UserSequence, split_leave_last_two
from ssept.model import ModelConfig, checkpoint_bytes, init_params
from ssept.regularization import SseConfig
from ssept.training import (
    Adam, Batch, NegativeSampler, NumericError, SamplingError, TrainConfig, batch_loss,
    bce_loss, bpr_loss, make_batch, train, train_step,
)


def cycle_data(n_users=20, n_items=10, length=8):
    """Deterministic next-item rule: item i is followed by i % m + 1."""
    seqs = []
    for u in range(1, n_users + 1):
        start = (u * 3) % n_items
        seqs.append(UserSequence(u, [(start + t) % n_items + 1 for t in range(length)]))
    return split_leave_last_two(seqs, n_users, n_items)


def scores(values):
    return Tensor(np.asarray(values, dtype=float).reshape(1, -1, 1))


def test_bce_at_zero_scores():
    loss = bce_loss(scores([0.0, 0.0]), scores([0.0, 0.0]), np.ones((1, 2, 1), bool)).item()
    assert math.isclose(loss, 2 * math.log(2), rel_tol=1e-15)


def test_bpr_at_equal_scores():
    loss = bpr_loss(scores([1.5, -2.0]), scores([1.5, -2.0]), np.ones((1, 2, 1), bool)).item()
    assert math.isclose(loss, math.log(2), rel_tol=1e-15)


def test_losses_vanish_under_perfect_separation():
    mask = np.ones((1, 1, 1), bool)
    assert bce_loss(scores([40.0]), scores([-40.0]), mask).item() < 1e-12
    assert bpr_loss(scores([40.0]), scores([-40.0]), mask).item() < 1e-12


def test_clamped_loss_is_finite():
    mask = np.ones((1, 1, 1), bool)
    loss = bce_loss(scores([-1e9]), scores([1e9]), mask).item()
    assert math.isfinite(loss)
    assert math.isclose(loss, 2 * (30 + math.log1p(math.exp(-30))), rel_tol=1e-12)


def test_bpr_shift_invariant():
    rng = np.random.default_rng(0)
    p, n = rng.normal(size=5), rng.normal(size=5)
    mask = np.ones((1, 5, 1), bool)
    assert math.isclose(bpr_loss(scores(p), scores(n), mask).item(),
                        bpr_loss(scores(p + 3.25), scores(n + 3.25), mask).item(), rel_tol=1e-12)


def test_losses_ignore_masked_steps_and_order():
    rng = np.random.default_rng(1)
    p, n = rng.normal(size=6), rng.normal(size=6)
    mask = np.array([True, False, True, True, False, True]).reshape(1, 6, 1)
    perm = rng.permutation(6)
    for fn in (bce_loss, bpr_loss):
        base = fn(scores(p), scores(n), mask).item()
        garbage = np.where(mask.ravel(), p, 1e6)
        assert fn(scores(garbage), scores(n), mask).item() == base
        assert fn(scores(p[perm]), scores(n[perm]), mask[:, perm]).item() == base


def test_all_masked_loss_is_zero():
    assert bce_loss(scores([1.0]), scores([2.0]), np.zeros((1, 1, 1), bool)).item() == 0.0


def test_sampler_singleton_negative():
    sampler = NegativeSampler({1: {1, 2}}, 3)
    rng = np.random.default_rng(0)
    assert {sampler.sample_negative(1, rng) for _ in range(50)} == {3}


def test_sampler_uniform_over_unseen():
    history = set(range(1, 11))
    sampler = NegativeSampler({7: history}, 100)
    draws = 100_000
    got = Counter(sampler.sample(np.full(draws, 7), np.random.default_rng(1)).tolist())
    assert not history & set(got)
    assert set(got) == set(range(11, 101))
    p = 1 / 90
    sigma = math.sqrt(draws * p * (1 - p))
    assert all(abs(c - draws * p) <= 5 * sigma for c in got.values())


def test_sampler_full_history_raises():
    with pytest.raises(SamplingError):
        NegativeSampler({1: {1, 2}}, 2).sample_negative(1, np.random.default_rng(0))


def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    p["w"].grad = np.zeros(2)
    Adam(p, lr=0.1).step(p)
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_moves_by_learning_rate():
    p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
    p["w"].grad = np.array([3.0])
    Adam(p, lr=1e-3).step(p)
    assert math.isclose(0.5 - p["w"].data[0], 1e-3, rel_tol=1e-6)


def test_adam_rejects_non_finite_gradient():
    p = {"V": Tensor(np.ones(2), requires_grad=True)}
    p["V"].grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericError, match="'V'"):
        Adam(p).step(p)


def test_train_config_validation():
    for bad in (dict(learning_rate=0), dict(beta1=1.0), dict(batch_size=0), dict(loss="mse"),
                dict(sampling_prob=2.0), dict(epochs=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_make_batch_right_aligns_pairs():
    data = cycle_data(n_users=2, length=6)
    cfg = ModelConfig(2, 10, 2, 2, 5, 1, 0.0)
    tc = TrainConfig(sse=None)
    sampler = NegativeSampler(data.full_history, 10)
    b = make_batch([1], data, cfg, tc, sampler, np.random.default_rng(0))
    train_items = data.train[1]  # four items
    assert b.inputs[0].tolist() == [0, 0] + train_items[:-1]
    assert b.mask[0, :, 0].tolist() == [False, False, True, True, True]
    assert b.targets[0, :, 0][b.mask[0, :, 0]].tolist() == train_items[1:]
    negs = b.negatives[0, :, 0]
    assert np.all(negs[~b.mask[0, :, 0]] == 0)
    assert not set(negs[b.mask[0, :, 0]].tolist()) & data.full_history[1]


def test_padding_user_rows_leave_loss_unchanged():
    data = cycle_data()
    cfg = ModelConfig(20, 10, 2, 4, 5, 1, 0.0)
    params = init_params(cfg, np.random.default_rng(0))
    tc = TrainConfig(sse=None)
    b = make_batch([1, 2, 3], data, cfg, tc, NegativeSampler(data.full_history, 10), np.random.default_rng(0))
    pad = lambda a: np.concatenate([a, np.zeros((2,) + a.shape[1:], a.dtype)])
    padded = Batch(pad(b.users), pad(b.inputs), pad(b.targets), pad(b.negatives), pad(b.mask))
    assert batch_loss(params, cfg, b, train=False).item() == batch_loss(params, cfg, padded, train=False).item()


def test_one_step_only_touches_reachable_rows():
    data = cycle_data()
    cfg = ModelConfig(20, 10, 2, 4, 5, 1, 0.0)
    params = init_params(cfg, np.random.default_rng(0))
    before = {k: p.data.copy() for k, p in params.items()}
    tc = TrainConfig(sse=None)
    b = make_batch([4], data, cfg, tc, NegativeSampler(data.full_history, 10), np.random.default_rng(0))
    train_step(params, cfg, tc, b, Adam(params), np.random.default_rng(0))
    used_items = set(b.inputs.ravel()) | set(b.targets[b.mask]) | set(b.negatives[b.mask])
    # row 0 is the (attended) padding token, so only real rows are checked
    for i in range(1, 11):
        changed = not np.array_equal(params["V"].data[i], before["V"][i])
        assert changed == (i in used_items)
    for u in range(21):
        assert (not np.array_equal(params["U"].data[u], before["U"][u])) == (u == 4)
    assert not np.array_equal(params["block0.W_Q"].data, before["block0.W_Q"])


def test_epochs_zero_returns_initial_params():
    data = cycle_data()
    cfg = ModelConfig(20, 10, 2, 4, 5, 1, 0.0)
    res = train(data, cfg, TrainConfig(epochs=0, seed=3))
    init = init_params(cfg, np.random.default_rng([3, 0]))
    assert res.log == []
    assert checkpoint_bytes(res.params, cfg) == checkpoint_bytes(init, cfg)


def test_loss_decreases_over_first_epochs():
    data = cycle_data()
    cfg = ModelConfig(20, 10, 4, 8, 6, 1, 0.0)
    res = train(data, cfg, TrainConfig(epochs=5, batch_size=4, learning_rate=0.01, sse=None))
    losses = [e.train_loss for e in res.log]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_training_is_deterministic():
    data = cycle_data()
    cfg = ModelConfig(20, 10, 2, 4, 5, 1, 0.3)
    tc = TrainConfig(epochs=3, batch_size=8, sse=SseConfig(0.5, 0.2, 0.2), sampling_prob=0.5)
    a, b = train(data, cfg, tc), train(data, cfg, tc)
    assert checkpoint_bytes(a.params, cfg) == checkpoint_bytes(b.params, cfg)
    assert [e.train_loss for e in a.log] == [e.train_loss for e in b.log]


def test_bpr_training_runs():
    data = cycle_data()
    cfg = ModelConfig(20, 10, 2, 4, 5, 1, 0.0)
    res = train(data, cfg, TrainConfig(epochs=2, loss="bpr", negatives_per_positive=3))
    assert len(res.log) == 2 and all(math.isfinite(e.train_loss) for e in res.log)


def test_gradient_matches_finite_differences_small_model():
    data = cycle_data(n_users=3, n_items=5, length=4)
    cfg = ModelConfig(3, 5, 2, 2, 4, 1, 0.0)
    params = init_params(cfg, np.random.default_rng(1))
    tc = TrainConfig(sse=None)
    b = make_batch([1, 2], data, cfg, tc, NegativeSampler(data.full_history, 5), np.random.default_rng(0))
    with Tape() as tape:
        loss = batch_loss(params, cfg, b, train=False)
    tape.backward(loss)
    h = 1e-6
    for name in ("V", "block0.W_K", "block0.ln2.gain"):
        p = params[name]
        flat = p.data.reshape(-1)
        for j in range(0, flat.size, 3):
            old = flat[j]
            flat[j] = old + h
            with ad.no_tape():
                up = batch_loss(params, cfg, b, train=False).item()
            flat[j] = old - h
            with ad.no_tape():
                down = batch_loss(params, cfg, b, train=False).item()
            flat[j] = old
            assert abs((up - down) / (2 * h) - p.grad.reshape(-1)[j]) < 1e-6
