"""Pre-norm Transformer blocks and the adapter that sparsifies them.

A block is built in ``full`` mode (plain trainable projections). Calling
:func:`adapt_model` turns it into ``lora`` mode (base weights frozen, low-rank
factors added) or ``sparse`` mode (LoRA plus top-L attention and the routed
FFN). The weights themselves are shared, so a block adapted with
``lam=1, beta=1`` computes exactly what it computed before.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .attention import MhaWeights, PQState, dense_mha, sparse_mha
from .config import BlockConfig, SparsityConfig
from .counters import annotate
from .errors import ConfigError, ShapeError
from .ffn import GroupedFfnWeights, RouteDecision, bspmv_ffn, dense_ffn, load_balance_loss, route
from .lora import Linear, LoraLinear
from .lora import trainable_count as lora_count
from .rng import make_rng
from .tensor import Tensor, add, layer_norm, matmul, reshape, take_rows

log = logging.getLogger(__name__)

MODES = ("full", "lora", "sparse")


@dataclass(eq=False)
class LayerNorm:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, d: int) -> "LayerNorm":
        return cls(Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.gamma, self.beta) if p.requires_grad]


@dataclass(eq=False)
class TransformerBlock:
    cfg: BlockConfig
    mha: MhaWeights
    ffn: GroupedFfnWeights
    ln1: LayerNorm
    ln2: LayerNorm
    mode: str = "full"
    pq: PQState | None = None
    last_route: RouteDecision | None = field(default=None, repr=False)

    @classmethod
    def init(cls, cfg: BlockConfig, seed: int = 0, *path) -> "TransformerBlock":
        d, D, sc = cfg.d_model, cfg.d_ffn, cfg.sparsity
        mha = MhaWeights(*(Linear.init(d, d, seed, *path, name) for name in "qkvo"), heads=cfg.heads)
        ffn = GroupedFfnWeights.init(
            d, D, sc.G, sc.G_active, seed, *path, "ffn", activation=cfg.activation, gated=sc.gated
        )
        return cls(cfg, mha, ffn, LayerNorm.init(d), LayerNorm.init(d))

    def __call__(self, x: Tensor) -> Tensor:
        return block_forward(x, self)

    def linear_layers(self) -> dict[str, Linear | LoraLinear]:
        out = dict(self.mha.named_layers())
        out["ffn_in"] = self.ffn.W_I
        out["ffn_out"] = self.ffn.W_O
        return out

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.linear_layers().values():
            params += layer.parameters()
        params += self.ln1.parameters() + self.ln2.parameters()
        if self.mode == "sparse":
            params.append(self.ffn.W_R)
        return params

    def balance_loss(self) -> Tensor | None:
        if self.mode != "sparse" or self.last_route is None:
            return None
        return load_balance_loss(self.last_route)


def _check_mode(blk: TransformerBlock, mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    wrapped = [isinstance(l, LoraLinear) for l in blk.linear_layers().values()]
    if mode == "full" and any(wrapped):
        raise ConfigError("full mode needs plain projections; this block has adapters")
    if mode != "full" and not all(wrapped):
        raise ConfigError(f"{mode} mode needs adapted projections; call adapt_model first")


def attention_sublayer(X: Tensor, blk: TransformerBlock, mode: str) -> Tensor:
    """``X + MHA(LN(X))``."""
    cfg = blk.cfg
    with annotate("mha"):
        xa = blk.ln1(X)
        if mode == "sparse":
            a = sparse_mha(xa, blk.mha, cfg, blk.pq)
        else:
            a = dense_mha(xa, blk.mha, causal=cfg.causal, scale=cfg.sparsity.scale_scores)
    return add(X, a)


def ffn_sublayer(X: Tensor, blk: TransformerBlock, mode: str) -> Tensor:
    """``X + FFN(LN(X))`` with batch and sequence flattened into tokens."""
    b, n, d = X.shape
    with annotate("ffn"):
        t = reshape(blk.ln2(X), (b * n, d))
        if mode == "sparse":
            r = route(t, blk.ffn)
            y = bspmv_ffn(t, blk.ffn, r)
            blk.last_route = r
        else:
            y = dense_ffn(t, blk.ffn.W_I, blk.ffn.W_O, blk.cfg.activation)
    return add(X, reshape(y, (b, n, d)))


def block_forward(X: Tensor, blk: TransformerBlock, mode: str | None = None) -> Tensor:
    """``h = X + MHA(LN(X)); out = h + FFN(LN(h))`` on a ``[batch, n, d]`` input."""
    mode = blk.mode if mode is None else mode
    _check_mode(blk, mode)
    if X.ndim != 3 or X.shape[2] != blk.cfg.d_model:
        raise ShapeError(f"block input must be [batch, n, {blk.cfg.d_model}], got {X.shape}")
    return ffn_sublayer(attention_sublayer(X, blk, mode), blk, mode)


def adapt_model(
    blocks: Iterable[TransformerBlock],
    mode: str = "sparse",
    sparsity: SparsityConfig | None = None,
    seed: int = 0,
) -> list[TransformerBlock]:
    """Move full-mode blocks to ``lora`` or ``sparse`` mode, in place.

    Every projection is wrapped in a :class:`LoraLinear` (which freezes its
    base weight) and layer norms are frozen. ``sparsity`` replaces each
    block's sparsity settings; ``G`` must not change since the FFN weights
    are already partitioned.
    """
    if mode not in ("lora", "sparse"):
        raise ConfigError(f"adapt_model targets lora or sparse mode, got {mode!r}")
    out = []
    for i, blk in enumerate(blocks):
        if blk.mode != "full":
            raise ConfigError(f"block {i} is already in {blk.mode} mode")
        if sparsity is not None:
            if sparsity.G != blk.ffn.G:
                raise ShapeError(f"block {i} has G={blk.ffn.G}, sparsity asks for G={sparsity.G}")
            blk.cfg = blk.cfg.with_(sparsity=sparsity)
        sc = blk.cfg.sparsity
        r = sc.lora_rank
        for name in ("q", "k", "v", "o"):
            old = getattr(blk.mha, name)
            setattr(blk.mha, name, LoraLinear.wrap(old.W, r, seed, i, name))
            log.info("block %d: linear_%s Linear -> LoraLinear (r=%d)", i, name, r)
        blk.ffn.W_I = LoraLinear.wrap(blk.ffn.W_I.W, r, seed, i, "ffn_in")
        blk.ffn.W_O = LoraLinear.wrap(blk.ffn.W_O.W, r, seed, i, "ffn_out")
        log.info("block %d: ffn_in, ffn_out Linear -> LoraLinear (r=%d)", i, r)
        for ln in (blk.ln1, blk.ln2):
            ln.gamma.requires_grad = ln.beta.requires_grad = False
        blk.ffn.G_active = sc.G_active
        blk.ffn.gated = sc.gated
        blk.mode = mode
        if mode == "sparse":
            blk.pq = PQState(sc.d_sub, sc.E, sc.codebook_period, seed=seed * 1000 + i)
            log.info("block %d: MHA -> top-L sparse MHA (lambda=%g), FFN -> routed FFN (G'=%d of %d)",
                     i, sc.lam, sc.G_active, sc.G)
        out.append(blk)
    return out


def trainable_count(blk: TransformerBlock) -> int:
    """Closed-form count of parameters adapted in ``blk``'s current mode.

    In sparse mode this includes the router and one set of codebooks, which
    are updated by Lloyd steps rather than gradients.
    """
    cfg, sc = blk.cfg, blk.cfg.sparsity
    d, D = cfg.d_model, cfg.d_ffn
    if blk.mode == "full":
        return 4 * d * d + 2 * d * D + 4 * d
    total = 4 * lora_count(d, d, sc.lora_rank) + lora_count(d, D, sc.lora_rank) + lora_count(D, d, sc.lora_rank)
    if blk.mode == "sparse":
        total += d * sc.G + sc.E * cfg.d_head
    return total


# -- toy language model -------------------------------------------------------
def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)[:, : d // 2]
    return out


@dataclass(eq=False)
class ToyModel:
    """Token embedding, a stack of blocks, final norm and output head."""

    embed: Tensor
    blocks: list[TransformerBlock]
    norm: LayerNorm
    head: Tensor

    @classmethod
    def init(cls, cfg: BlockConfig, vocab: int, n_blocks: int = 2, seed: int = 0) -> "ToyModel":
        rng = make_rng(seed, "toy", "embed")
        embed = Tensor(rng.normal(size=(vocab, cfg.d_model)), requires_grad=True)
        head = Tensor(
            make_rng(seed, "toy", "head").normal(scale=1.0 / np.sqrt(cfg.d_model), size=(cfg.d_model, vocab)),
            requires_grad=True,
        )
        blocks = [TransformerBlock.init(cfg, seed, "block", i) for i in range(n_blocks)]
        return cls(embed, blocks, LayerNorm.init(cfg.d_model), head)

    @property
    def vocab(self) -> int:
        return self.embed.shape[0]

    def __call__(self, tokens: np.ndarray) -> Tensor:
        """Logits of shape ``[batch * n, vocab]`` for integer ``tokens [batch, n]``."""
        tokens = np.asarray(tokens)
        b, n = tokens.shape
        d = self.embed.shape[1]
        x = reshape(take_rows(self.embed, tokens.ravel()), (b, n, d))
        x = add(x, Tensor(sinusoidal_positions(n, d)))
        for blk in self.blocks:
            x = blk(x)
        return matmul(reshape(self.norm(x), (b * n, d)), self.head)

    def balance_loss(self) -> Tensor | None:
        losses = [l for l in (blk.balance_loss() for blk in self.blocks) if l is not None]
        if not losses:
            return None
        total = losses[0]
        for l in losses[1:]:
            total = add(total, l)
        return total

    def parameters(self) -> list[Tensor]:
        params = [self.embed, self.head] + self.norm.parameters()
        for blk in self.blocks:
            params += blk.parameters()
        return params
