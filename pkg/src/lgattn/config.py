"""Flat run configuration: defaults, then a key=value file, then command-line flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from lgattn import kvtext
from lgattn.attention import BLOCK_BANDED, GLOBAL
from lgattn.errors import ConfigError
from lgattn.model import BYTE_VOCAB, ModelConfig
from lgattn.posenc import DEFAULT_ROPE_THETA
from lgattn.seeding import derive_seed
from lgattn.trainer import Schedule

MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig) if f.name != "seed")


@dataclass(frozen=True)
class RunConfig:
    # model
    n_layers: int = 4
    hidden_size: int = 128
    n_heads: int = 4
    head_dim: int = 32
    ff_hidden: int = 512
    vocab_size: int = BYTE_VOCAB
    max_seq_len: int = 256
    attn: str = GLOBAL
    window: int | None = None
    chunk: int | None = None
    group_size: int | None = None
    local_semantics: str = BLOCK_BANDED
    logit_side_compensation: bool = False
    pos_emb: str = "rope"
    rope_theta: float = DEFAULT_ROPE_THETA
    rope_scale: float = 1.0
    # optimisation
    max_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup: int = 200
    steps: int = 2000
    batch_size: int = 8
    seq_len: int = 256
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip: float = 1.0
    log_every: int = 10
    seed: int = 0
    # data and output
    train_data: str | None = None
    eval_data: str | None = None
    mask_cross_doc: bool = False
    out_dir: str = "run"

    def model_config(self) -> ModelConfig:
        values = {k: getattr(self, k) for k in MODEL_KEYS}
        return ModelConfig(**values, seed=derive_seed(self.seed, "init"))

    def schedule(self) -> Schedule:
        return Schedule(self.max_lr, self.min_lr, self.warmup, self.steps)

    def optim_kwargs(self) -> dict:
        return dict(beta1=self.beta1, beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay,
                    clip=self.clip)

    def validate(self) -> "RunConfig":
        self.model_config()
        self.schedule()
        for key in ("batch_size", "log_every"):
            if getattr(self, key) < 1:
                raise ConfigError("must be >= 1", key=key)
        if self.seq_len < 2:
            raise ConfigError("must be >= 2", key="seq_len")
        if self.pos_emb == "absolute" and self.seq_len > self.max_seq_len:
            raise ConfigError(f"seq_len {self.seq_len} exceeds the absolute table ({self.max_seq_len})",
                              key="seq_len")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("betas must lie in [0, 1)", key="beta1")
        return self

    def to_text(self) -> str:
        return kvtext.to_text(dataclasses.asdict(self))


def defaults() -> dict:
    return {f.name: f.default for f in dataclasses.fields(RunConfig)}


def parse_config(path=None, flags: dict[str, str] | None = None, text: str | None = None) -> RunConfig:
    """Defaults < file (or ``text``) < ``flags``. Unknown keys and bad values raise ConfigError."""
    types = kvtext.field_types(RunConfig)
    values = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    for key, raw, line in kvtext.parse_lines(text or ""):
        if key not in types:
            raise ConfigError("unknown key", key=key, line=line)
        values[key] = kvtext.coerce(key, raw, types[key], line)
    for key, raw in (flags or {}).items():
        if key not in types:
            raise ConfigError("unknown key", key=key)
        values[key] = kvtext.coerce(key, str(raw), types[key]) if isinstance(raw, str) else raw
    return RunConfig(**values).validate()
