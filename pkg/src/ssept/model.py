"""The personalized causal self-attention network and its checkpoint format."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"SSEPT1"
CHECKPOINT_VERSION = 1

_BLOCK_PARAMS = ("W_Q", "W_K", "W_V", "W1", "b1", "W2", "b2",
                 "ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias")


@dataclass(frozen=True)
class ModelConfig:
    n_users: int
    n_items: int
    d_user: int = 50
    d_item: int = 50
    max_len: int = 50
    n_blocks: int = 2
    dropout: float = 0.2

    def __post_init__(self):
        if self.d_user < 0 or self.d_item < 1:
            raise ValueError(f"need d_user >= 0 and d_item >= 1, got {self.d_user}, {self.d_item}")
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.max_len < 2:
            raise ValueError(f"max_len must be >= 2, got {self.max_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.n_users < 1 or self.n_items < 1:
            raise ValueError("model needs at least one user and one item")

    @property
    def d(self) -> int:
        return self.d_user + self.d_item

    @property
    def personalized(self) -> bool:
        return self.d_user > 0


@dataclass
class AttentionMap:
    block: int
    matrix: np.ndarray  # T x T, row i attends to columns 0..i


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in checkpoint order."""
    d = cfg.d
    shapes = {
        "U": (cfg.n_users + 1, cfg.d_user),
        "V": (cfg.n_items + 1, cfg.d_item),
        "P": (cfg.max_len, d),
    }
    for b in range(cfg.n_blocks):
        for name in _BLOCK_PARAMS:
            shapes[f"block{b}.{name}"] = (d,) if name[0] in "bl" else (d, d)
    shapes["final.gain"] = (d,)
    shapes["final.bias"] = (d,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) for matrices and tables; zero biases, unit gains."""
    bound = 1.0 / math.sqrt(cfg.d)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _check_indices(users: np.ndarray, items: np.ndarray, cfg: ModelConfig) -> None:
    if users.size and (users.min() < 0 or users.max() > cfg.n_users):
        raise IndexError(f"user index out of range 0..{cfg.n_users}")
    if items.size and (items.min() < 0 or items.max() > cfg.n_items):
        raise IndexError(f"item index out of range 0..{cfg.n_items}")


def embed_sequence(users, items, params, cfg: ModelConfig, train: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Rows ``[V[item_t]; U[user]] + P[t]`` for a batch, shape ``(N, T, d)``."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    _check_indices(users, items, cfg)
    x = ad.gather_rows(params["V"], items)
    if cfg.personalized:
        user_rows = np.broadcast_to(users[:, None], items.shape)
        x = ad.concat_last_dim(x, ad.gather_rows(params["U"], user_rows))
    x = ad.add(x, params["P"])
    if train:
        x = ad.dropout_apply(x, ad.dropout_mask(x.shape, cfg.dropout, rng), cfg.dropout)
    return x


def attention_block(x: Tensor, params, b: int, cfg: ModelConfig, train: bool = False,
                    rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
    """One pre-norm block: ``x + drop(SA(LN(x)))`` then ``x + drop(FFN(LN(x)))``."""
    p = {name: params[f"block{b}.{name}"] for name in _BLOCK_PARAMS}
    rate = cfg.dropout if train else 0.0

    h = ad.layer_norm(x, p["ln1.gain"], p["ln1.bias"])
    q = ad.matmul(h, p["W_Q"])
    k = ad.matmul(h, p["W_K"])
    v = ad.matmul(h, p["W_V"])
    weights = ad.masked_softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(cfg.d)))
    s = ad.matmul(weights, v)
    x = ad.add(x, ad.dropout_apply(s, ad.dropout_mask(s.shape, rate, rng), rate))

    h = ad.layer_norm(x, p["ln2.gain"], p["ln2.bias"])
    f = ad.relu(ad.add(ad.matmul(h, p["W1"]), p["b1"]))
    f = ad.add(ad.matmul(f, p["W2"]), p["b2"])
    x = ad.add(x, ad.dropout_apply(f, ad.dropout_mask(f.shape, rate, rng), rate))
    return x, weights.data


def forward(users, items, params, cfg: ModelConfig, train: bool = False,
            rng: np.random.Generator | None = None) -> tuple[Tensor, list[np.ndarray]]:
    """Hidden states ``(N, T, d)`` after all blocks and the final layer norm.

    Also returns the attention weights of every block, each ``(N, T, T)``.
    """
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    x = embed_sequence(users, items, params, cfg, train, rng)
    maps = []
    for b in range(cfg.n_blocks):
        x, w = attention_block(x, params, b, cfg, train, rng)
        maps.append(w)
    return ad.layer_norm(x, params["final.gain"], params["final.bias"]), maps


def output_embeddings(users, items, params, cfg: ModelConfig) -> Tensor:
    """``[V[item]; U[user]]`` for an item array of shape ``(N, ...)``."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    _check_indices(users, items, cfg)
    emb = ad.gather_rows(params["V"], items)
    if cfg.personalized:
        user_rows = np.broadcast_to(users.reshape(users.shape + (1,) * (items.ndim - 1)), items.shape)
        emb = ad.concat_last_dim(emb, ad.gather_rows(params["U"], user_rows))
    return emb


def score_steps(hidden: Tensor, users, items, params, cfg: ModelConfig) -> Tensor:
    """Scores of items ``(N, T, k)`` against step hidden states ``(N, T, d)``."""
    emb = output_embeddings(users, items, params, cfg)                 # N,T,k,d
    return ad.rowdot(emb, hidden)


def score(hidden_step: np.ndarray, user: int, item: int, params, cfg: ModelConfig) -> float:
    """Single score: the step hidden state dotted with ``[V[item]; U[user]]``."""
    out = params["V"].data[item]
    if cfg.personalized:
        out = np.concatenate([out, params["U"].data[user]])
    return float(np.dot(hidden_step, out))


def score_candidates(users, windows, candidates, params, cfg: ModelConfig) -> np.ndarray:
    """Inference scores ``(N, C)`` of candidate items at the last window position."""
    with ad.no_tape():
        hidden, _ = forward(users, windows, params, cfg, train=False)
        last = hidden.data[:, -1, :]
        cands = np.asarray(candidates, dtype=np.int64)
        emb = output_embeddings(users, cands, params, cfg).data       # N,C,d
    return np.einsum("ncd,nd->nc", emb, last)


def extract_attention_maps(user: int, items, params, cfg: ModelConfig) -> list[AttentionMap]:
    """Inference-mode attention weights for one input window."""
    items = np.asarray(items, dtype=np.int64).reshape(1, -1)
    with ad.no_tape():
        _, maps = forward(np.array([user]), items, params, cfg, train=False)
    return [AttentionMap(b, m[0].copy()) for b, m in enumerate(maps)]


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


_HEADER_KEYS = ("n_users", "n_items", "d_user", "d_item", "max_len", "n_blocks", "dropout")


def checkpoint_bytes(params, cfg: ModelConfig) -> bytes:
    header = "".join(f"{k} = {getattr(cfg, k)!r}\n" for k in _HEADER_KEYS) + "\n"
    payload = b"".join(params[name].data.astype("<f8").tobytes() for name in param_shapes(cfg))
    return (CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION) + header.encode("ascii")
            + payload + struct.pack("<I", zlib.crc32(payload)))


def save_checkpoint(path: str | Path, params, cfg: ModelConfig) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, cfg))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], ModelConfig]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack_from("<H", blob, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(CHECKPOINT_MAGIC) + 2
    end = blob.find(b"\n\n", start)
    if end < 0:
        raise CheckpointError(f"{path}: unterminated header")
    fields = {}
    for line in blob[start:end].decode("ascii").splitlines():
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        cfg = ModelConfig(**{k: (float if k == "dropout" else int)(fields[k]) for k in _HEADER_KEYS})
    except KeyError as exc:
        raise CheckpointError(f"{path}: header missing {exc}") from None
    payload, crc = blob[end + 2:-4], blob[-4:]
    if struct.unpack("<I", crc)[0] != zlib.crc32(payload):
        raise CheckpointError(f"{path}: CRC mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    params, off = {}, 0
    shapes = param_shapes(cfg)
    if flat.size != sum(math.prod(s) for s in shapes.values()):
        raise CheckpointError(f"{path}: payload size does not match header dimensions")
    for name, shape in shapes.items():
        n = math.prod(shape)
        params[name] = Tensor(flat[off:off + n].reshape(shape).astype(np.float64),
                              requires_grad=True, name=name)
        off += n
    return params, cfg
