"""Flat ``section.key = value`` run configuration.

Every field has one source of truth: the config file sets it, a command-line
flag of the same dotted name overrides it.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import WindowConfig
from .evaluation import EvalConfig
from .model import ModelConfig
from .regularization import DecayConfig, SseConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    path: str = ""
    delimiter: str = "tab"
    strict: bool = False
    min_user_count: int = 1
    min_item_count: int = 1
    cache: str = "sequences.bin"


@dataclass
class ModelSection:
    d_u: int = 50
    d_i: int = 50
    max_len: int = 50
    blocks: int = 2
    dropout: float = 0.2
    personalized: bool = True


@dataclass
class TrainSection:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 200
    loss: str = "bce"
    negatives: int = 1
    weight_decay: float = 0.0
    sampling_prob: float = 0.0
    eval_every: int = 1


@dataclass
class SseSection:
    enabled: bool = True
    p_u: float = 0.92
    p_i: float = 0.1
    p_y: float = 0.1


@dataclass
class EvalSection:
    k: int = 10
    negatives: int = 100
    split: str = "test"


@dataclass
class PathSection:
    checkpoint: str = "model.ckpt"
    output_dir: str = "out"


@dataclass
class AblateSection:
    axis: str = ""
    values: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sse: SseSection = field(default_factory=SseSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathSection = field(default_factory=PathSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    # ------------------------------------------------------------ keys

    @classmethod
    def keys(cls) -> dict[str, type]:
        """Every dotted key with its value type."""
        out = {}
        probe = cls()
        for f in fields(cls):
            value = getattr(probe, f.name)
            if dataclasses.is_dataclass(value):
                for sub in fields(value):
                    out[f"{f.name}.{sub.name}"] = type(getattr(value, sub.name))
            else:
                out[f.name] = type(value)
        return out

    def get(self, key: str):
        obj = self
        for part in key.split("."):
            obj = getattr(obj, part)
        return obj

    def set(self, key: str, raw) -> None:
        types = self.keys()
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(key, raw, types[key])
        head, _, tail = key.rpartition(".")
        setattr(self.get(head) if head else self, tail, value)

    # ------------------------------------------------------------ I/O

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            try:
                cfg.set(key.strip(), value.strip())
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, str(path))

    def to_text(self) -> str:
        lines = []
        for key in self.keys():
            value = self.get(key)
            lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"

    # ------------------------------------------------------------ component configs

    def validate(self) -> list[str]:
        """All problems found, so the CLI can report them together before any work."""
        problems = []
        for build in (self.window_config, self.train_config, self.eval_config,
                      lambda: self.model_config(1, 1)):
            try:
                build()
            except ValueError as exc:
                problems.append(str(exc))
        if self.eval.split not in ("valid", "test"):
            problems.append(f"eval.split must be 'valid' or 'test', got {self.eval.split!r}")
        return problems

    def model_config(self, n_users: int, n_items: int) -> ModelConfig:
        m = self.model
        return ModelConfig(n_users=n_users, n_items=n_items,
                           d_user=m.d_u if m.personalized else 0, d_item=m.d_i,
                           max_len=m.max_len, n_blocks=m.blocks, dropout=m.dropout)

    def window_config(self) -> WindowConfig:
        return WindowConfig(self.model.max_len, self.train.sampling_prob)

    def sse_config(self) -> SseConfig | None:
        s = self.sse
        return SseConfig(s.p_u, s.p_i, s.p_y) if s.enabled else None

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            learning_rate=t.lr, beta1=t.beta1, beta2=t.beta2, adam_eps=t.adam_eps,
            batch_size=t.batch_size, epochs=t.epochs, seed=self.seed, loss=t.loss,
            negatives_per_positive=t.negatives, sse=self.sse_config(),
            decay=DecayConfig(t.weight_decay), sampling_prob=t.sampling_prob,
            eval_every=t.eval_every,
        )

    def eval_config(self, negatives: int | None = None) -> EvalConfig:
        return EvalConfig(k=self.eval.k, negatives=negatives or self.eval.negatives, seed=self.seed)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw, typ: type):
    if not isinstance(raw, str):
        return typ(raw)
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None
    return text
