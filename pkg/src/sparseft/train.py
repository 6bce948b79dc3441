"""Synthetic data, a small Adam optimiser and the toy copy-task trainer."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .attention import _as_batch, _project
from .block import ToyModel, adapt_model, sinusoidal_positions
from .config import BlockConfig, SparsityConfig
from .errors import NonFiniteError
from .rng import make_rng
from .tensor import Tensor, add, backward, cross_entropy, matmul, mul, no_grad, reshape, softmax, take_rows, transpose

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RandomBatch:
    """Either Gaussian embeddings ``[batch, seq, d_model]`` or token ids ``[batch, seq]``."""

    embeddings: np.ndarray | None = None
    tokens: np.ndarray | None = None


def gen_random_sequences(batch: int, seq: int, d_model: int | None = None, seed: int = 0, vocab: int | None = None) -> RandomBatch:
    """Seeded random batch; pass ``vocab`` for token ids instead of embeddings."""
    if batch < 1 or seq < 1:
        raise ValueError("batch and seq must be positive")
    rng = make_rng(seed, "batch", batch, seq)
    if vocab is not None:
        return RandomBatch(tokens=rng.integers(vocab, size=(batch, seq)))
    if d_model is None or d_model < 1:
        raise ValueError("d_model must be positive")
    return RandomBatch(embeddings=rng.standard_normal((batch, seq, d_model)))


def copy_task(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Targets ``y[t] = x[t-1]`` with position 0 masked out."""
    targets = np.roll(tokens, 1, axis=1)
    weights = np.ones(tokens.shape)
    weights[:, 0] = 0.0
    return targets.ravel(), weights.ravel()


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class StepMetrics:
    step: int
    loss: float
    balance: float | None = None
    router_counts: list[list[int]] = field(default_factory=list)
    quant_error: float | None = None


def toy_model(
    mode: str,
    sparsity: SparsityConfig | None = None,
    d_model: int = 64,
    d_head: int = 16,
    d_ffn: int = 128,
    vocab: int = 64,
    n_blocks: int = 2,
    seed: int = 0,
) -> ToyModel:
    """A small causal model; ``mode`` is full, lora, sparse or dense.

    ``dense`` is lora tuning with sparsity switched off (``lam=1, beta=1``).
    """
    sc = sparsity or SparsityConfig()
    if mode == "dense":
        mode, sc = "lora", sc.with_(lam=1.0, beta=1.0)
    cfg = BlockConfig(d_model, d_head, d_ffn, causal=True, name="toy", sparsity=sc)
    model = ToyModel.init(cfg, vocab, n_blocks, seed)
    if mode != "full":
        adapt_model(model.blocks, mode, seed=seed)
    return model


def run_train(
    model: ToyModel,
    steps: int,
    batch_size: int = 16,
    seq_length: int = 64,
    lr: float = 1e-2,
    seed: int = 0,
    balance_coef: float | None = None,
    callback: Callable[[StepMetrics], None] | None = None,
    resample: bool = True,
) -> list[StepMetrics]:
    """Train ``model`` on the copy task and return one record per step.

    ``balance_coef`` defaults to the blocks' configured coefficient; 0 turns
    the auxiliary loss off. With ``resample`` off every step reuses the
    first batch. A non-finite loss aborts with
    :class:`NonFiniteError`.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    coef = model.blocks[0].cfg.sparsity.balance_coef if balance_coef is None else balance_coef
    opt = Adam(model.parameters(), lr=lr)
    history = []
    for step in range(1, steps + 1):
        batch_seed = seed * 1_000_003 + (step if resample else 1)
        tokens = gen_random_sequences(batch_size, seq_length, seed=batch_seed, vocab=model.vocab).tokens
        targets, weights = copy_task(tokens)
        try:
            logits = model(tokens)
            task = cross_entropy(logits, targets, weights)
            loss = task
            aux = model.balance_loss()
            if aux is not None and coef > 0:
                loss = add(task, mul(aux, coef))
        except NonFiniteError as exc:
            raise NonFiniteError(f"training diverged at step {step}: {exc}") from exc
        value = task.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"training diverged at step {step}: loss={value}")
        opt.zero_grad()
        backward(loss)
        opt.step()
        rec = StepMetrics(step, value, None if aux is None else aux.item())
        errors = []
        for blk in model.blocks:
            if blk.last_route is not None:
                rec.router_counts.append(blk.last_route.counts().tolist())
            if blk.pq is not None:
                blk.pq.step(step)
                errors.append(blk.pq.error())
        if errors:
            rec.quant_error = float(np.mean(errors))
        history.append(rec)
        if callback is not None:
            callback(rec)
        log.debug("step %d loss %.4f", step, value)
    return history


def activation_cv(history: Sequence[StepMetrics], last: int | None = None) -> float:
    """Coefficient of variation of group activation counts, averaged over blocks."""
    recs = [h for h in history if h.router_counts]
    if last is not None:
        recs = recs[-last:]
    if not recs:
        raise ValueError("history has no router activity")
    counts = np.sum([np.asarray(h.router_counts, dtype=float) for h in recs], axis=0)
    cv = counts.std(axis=1) / counts.mean(axis=1)
    return float(cv.mean())


# -- attention concentration ---------------------------------------------------
def _row_mass_at(sorted_rows: np.ndarray, lengths: np.ndarray, props: np.ndarray) -> np.ndarray:
    """Mean over rows of the top-``p`` cumulative mass, linearly interpolated."""
    out = np.zeros(len(props))
    for row, m in zip(sorted_rows, lengths):
        cum = np.concatenate([[0.0], np.cumsum(row[:m])])
        out += np.interp(props * m, np.arange(m + 1), cum)
    return out / len(lengths)


def attention_cdf(weights: np.ndarray, props: Sequence[float], causal: bool = False) -> list[tuple[float, float]]:
    """Cumulative attention mass captured by the largest ``p`` share of each row.

    ``weights`` has rows summing to 1 along the last axis. With ``causal``
    set, row ``i`` only spans its ``i + 1`` visible keys.
    """
    w = np.asarray(weights, dtype=np.float64)
    n_q, n_k = w.shape[-2:]
    rows = w.reshape(-1, n_k)
    lengths = np.tile(np.arange(1, n_q + 1) if causal else np.full(n_q, n_k), rows.shape[0] // n_q)
    srt = -np.sort(-rows, axis=1)
    p = np.asarray(props, dtype=np.float64)
    return list(zip(p.tolist(), _row_mass_at(srt, lengths, p).tolist()))


def report_attention_cdf(model: ToyModel, tokens: np.ndarray, props: Sequence[float] | None = None) -> list[tuple[float, float]]:
    """Attention concentration of ``model`` on ``tokens``, pooled over blocks and heads."""
    props = list(props) if props is not None else [0.01, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0]
    tokens = np.asarray(tokens)
    b, n = tokens.shape
    mats = []
    with no_grad():
        d = model.embed.shape[1]
        x = reshape(take_rows(model.embed, tokens.ravel()), (b, n, d))
        x = add(x, Tensor(sinusoidal_positions(n, d)))
        for blk in model.blocks:
            q, k, _ = _project(_as_batch(blk.ln1(x)), blk.mha)
            scores = matmul(q, transpose(k, (0, 2, 1)))
            mask = np.tril(np.ones((n, n), dtype=bool)) if blk.cfg.causal else None
            mats.append(softmax(scores, mask).data)
            x = blk(x)
    causal = model.blocks[0].cfg.causal
    return attention_cdf(np.concatenate(mats), props, causal=causal)


def iter_metrics_lines(history: Sequence[StepMetrics]) -> Iterator[str]:
    for h in history:
        parts = [f"step={h.step}", f"loss={h.loss:.6f}"]
        if h.balance is not None:
            parts.append(f"balance={h.balance:.6f}")
        if h.router_counts:
            parts.append("router=" + "|".join(",".join(map(str, c)) for c in h.router_counts))
        if h.quant_error is not None:
            parts.append(f"qerr={h.quant_error:.6f}")
        yield " ".join(parts)
