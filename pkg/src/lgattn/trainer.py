"""Adam with warmup + linear decay, the training loop, and bucketed perplexity."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lgattn.checkpoint import save_checkpoint
from lgattn.data import Document, LengthBucket
from lgattn.errors import ConfigError, ContractError, NonFiniteError
from lgattn.model import BOS, EOS, ModelConfig, TransformerWeights, forward, init_weights
from lgattn.numerics import Tape, cross_entropy, no_grad
from lgattn.seeding import rng_for


@dataclass(frozen=True)
class Schedule:
    max_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup: int = 2000
    total: int = 20000

    def __post_init__(self):
        if self.warmup < 0 or self.total < self.warmup:
            raise ConfigError(f"need 0 <= warmup <= total, got warmup={self.warmup}, total={self.total}",
                              key="warmup")
        if self.max_lr < 0 or self.min_lr < 0:
            raise ConfigError("learning rates must be >= 0", key="max_lr")


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear ramp 0 -> max_lr over warmup, then linear decay to min_lr at total; clamped past total."""
    s = schedule
    if step > s.total:
        return s.min_lr
    if step <= s.warmup:
        return s.max_lr * step / s.warmup if s.warmup else s.max_lr
    frac = (step - s.warmup) / (s.total - s.warmup)
    return s.min_lr + (s.max_lr - s.min_lr) * (1.0 - frac)


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip: float | None = 1.0

    @classmethod
    def for_params(cls, params: dict, **kw) -> "OptimState":
        state = cls(**kw)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def adam_step(state: OptimState, params: dict, grads: dict[str, np.ndarray], lr: float) -> float:
    """Clip by global norm, decay matrices, then take a bias-corrected Adam step in place.

    Returns the pre-clip gradient norm. Nothing is modified if any gradient
    is non-finite.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name}", name=name)
    norm = global_norm(grads)
    factor = 1.0
    if state.clip is not None and norm > state.clip:
        factor = state.clip / norm
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        g = g * factor if factor != 1.0 else g
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        data = p.data
        if state.weight_decay and data.ndim >= 2:
            data = data - lr * state.weight_decay * data
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = (data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return norm


# -- training loop ------------------------------------------------------------

def lm_loss(weights: TransformerWeights, tokens: np.ndarray, mask: np.ndarray):
    """Next-token loss over packed rows; padding is neither attended to nor scored."""
    logits = forward(weights, tokens[:, :-1], pad_mask=mask[:, :-1])
    return cross_entropy(logits, tokens[:, 1:], ignore_mask=~mask[:, 1:])


def row_order(n_rows: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Row indices per step: successive shuffled passes over the packed rows."""
    rng = rng_for(seed, "data")
    need = steps * batch_size
    chunks, have = [], 0
    while have < need:
        chunks.append(rng.permutation(n_rows))
        have += n_rows
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return [flat[i * batch_size:(i + 1) * batch_size] for i in range(steps)]


@dataclass
class TrainResult:
    weights: TransformerWeights
    optim: OptimState
    log: list[tuple[int, float, float]]


def write_log(path, log) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in log:
            w.writerow([step, repr(lr), repr(loss)])


def train(config: ModelConfig, tokens: np.ndarray, mask: np.ndarray, steps: int, schedule: Schedule,
          batch_size: int = 8, seed: int = 0, log_every: int = 10, checkpoint_path=None, log_path=None,
          dtype=np.float32, weights: TransformerWeights | None = None, optim: OptimState | None = None,
          **optim_kw) -> TrainResult:
    """Train on packed rows; logs (step, lr, loss) every ``log_every`` steps and at the last step.

    If the loss or a gradient turns non-finite, the current (last good)
    weights are written to ``checkpoint_path`` before the error propagates.
    """
    if steps < 0:
        raise ConfigError("steps must be >= 0", key="steps")
    weights = weights or init_weights(config, dtype)
    params = weights.params
    optim = optim or OptimState.for_params(params, **optim_kw)
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    log: list[tuple[int, float, float]] = []

    def dump():
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, weights, optim)
        if log_path is not None:
            write_log(log_path, log)

    for p in params.values():
        p.requires_grad = True
    try:
        for i, rows in enumerate(row_order(len(tokens), batch_size, steps, seed)):
            step = optim.step + 1
            lr = lr_at(schedule, step)
            for p in params.values():
                p.grad = None
            with Tape() as tape:
                loss = lm_loss(weights, tokens[rows], mask[rows])
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"loss became {value} at step {step}")
            tape.backward(loss)
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
            adam_step(optim, params, grads, lr)
            if step % log_every == 0 or i == steps - 1:
                log.append((step, lr, value))
    except NonFiniteError:
        dump()
        raise
    finally:
        for p in params.values():
            p.requires_grad = False
            p.grad = None
    dump()
    return TrainResult(weights, optim, log)


# -- evaluation ----------------------------------------------------------------

@dataclass
class PplRow:
    bucket_min: int
    bucket_max: int
    count: int
    ppl: float | None


def score_windows(weights: TransformerWeights, ids: list[list[int]], targets: list[list[int]],
                  batch_size: int = 8) -> tuple[float, int]:
    """Summed NLL and token count over independent windows (each starts at position 0)."""
    by_len: dict[int, list[int]] = {}
    for i, w in enumerate(ids):
        by_len.setdefault(len(w), []).append(i)
    total, count = 0.0, 0
    with no_grad():
        for _, members in sorted(by_len.items()):
            for s in range(0, len(members), batch_size):
                sel = members[s:s + batch_size]
                x = np.array([ids[i] for i in sel])
                y = np.array([targets[i] for i in sel])
                logits = forward(weights, x).data.astype(np.float64)
                shifted = logits - logits.max(axis=-1, keepdims=True)
                logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
                total -= float(np.take_along_axis(logp, y[..., None], axis=-1).sum())
                count += y.size
    return total, count


def document_windows(doc: Document, seq_len: int) -> tuple[list[list[int]], list[list[int]]]:
    """Input BOS + bytes, target bytes + EOS, cut into non-overlapping windows."""
    toks = doc.tokens()
    x = [BOS] + toks
    y = toks + [EOS]
    starts = range(0, len(x), seq_len)
    return [x[s:s + seq_len] for s in starts], [y[s:s + seq_len] for s in starts]


def eval_ppl(weights: TransformerWeights, docs: list[Document], buckets: list[LengthBucket],
             seq_len: int | None = None) -> list[PplRow]:
    seq_len = seq_len or weights.config.max_seq_len
    by_id = {d.id: d for d in docs}
    rows = []
    for b in buckets:
        ids, targets = [], []
        for doc_id in b.doc_ids:
            xs, ys = document_windows(by_id[doc_id], seq_len)
            ids += xs
            targets += ys
        if not ids:
            rows.append(PplRow(b.min_len, b.max_len, 0, None))
            continue
        nll, n = score_windows(weights, ids, targets)
        rows.append(PplRow(b.min_len, b.max_len, len(b.doc_ids), math.exp(nll / n)))
    return rows


def write_ppl_csv(path_or_file, rows: list[PplRow]) -> None:
    own = isinstance(path_or_file, (str, Path))
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bucket_min", "bucket_max", "count", "ppl"])
        for r in rows:
            w.writerow([r.bucket_min, r.bucket_max, r.count, "" if r.ppl is None else repr(r.ppl)])
    finally:
        if own:
            f.close()


def mean_loss(weights: TransformerWeights, tokens: np.ndarray, mask: np.ndarray, batch_size: int = 8) -> float:
    """Token-weighted next-token loss over packed rows, without gradients."""
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(tokens), batch_size):
            t, m = tokens[s:s + batch_size], mask[s:s + batch_size]
            n = int(m[:, 1:].sum())
            if n:
                total += lm_loss(weights, t, m).item() * n
                count += n
    return total / count
