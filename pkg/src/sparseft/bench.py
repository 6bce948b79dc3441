"""Counter-based profiling of one block on a random batch."""
from __future__ import annotations

import gc
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any

from .block import TransformerBlock, adapt_model, attention_sublayer, block_forward, ffn_sublayer
from .config import SparsityConfig, preset
from .counters import counting
from .errors import ConfigError
from .tensor import Tensor, backward as run_backward, tsum
from .train import gen_random_sequences

log = logging.getLogger(__name__)

SCHEMA = "sparseft.profile/1"
TUNINGS = ("full", "lora", "sparse")
MODULES = ("mha", "ffn", "both")


@dataclass
class ProfileReport:
    config: dict[str, Any]
    seed: int
    flops: int
    module_flops: dict[str, int]
    peak_bytes: int
    attention_entries: int
    attention_entries_per_head: float
    breakdown: list[dict[str, Any]] = field(default_factory=list)
    schema: str = SCHEMA

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ProfileReport":
        return cls(**json.loads(text))


def _breakdown(by_op: dict[str, int], total: int) -> list[dict[str, Any]]:
    rows = []
    for name, n in sorted(by_op.items(), key=lambda kv: (-kv[1], kv[0])):
        rows.append({"name": name, "flops": n, "share": round(100.0 * n / total, 4) if total else 0.0})
    return rows


def run_profile(
    name: str,
    tuning: str = "sparse",
    module: str = "both",
    d_lora: int = 16,
    seq_length: int = 512,
    batch_size: int = 16,
    backward: bool = False,
    lam: float = 0.125,
    beta: float = 0.5,
    seed: int = 0,
    causal: bool = False,
) -> ProfileReport:
    """Build one preset block, run it once on a random batch and count costs.

    Everything (weights, activations, attention patterns, gradients) is
    allocated inside the measured scope, so ``peak_bytes`` covers the whole
    step. Attention is bidirectional unless ``causal`` is set, so a sparse
    run stores exactly ``L`` entries per query.
    """
    if tuning not in TUNINGS:
        raise ConfigError(f"tuning must be one of {TUNINGS}, got {tuning!r}")
    if module not in MODULES:
        raise ConfigError(f"module must be one of {MODULES}, got {module!r}")
    sc = SparsityConfig(lam=lam, beta=beta, lora_rank=d_lora)
    cfg = preset(name, sparsity=sc, causal=causal)
    gc.collect()
    started = time.perf_counter()
    with counting() as c:
        blk = TransformerBlock.init(cfg, seed, "profile")
        if tuning != "full":
            adapt_model([blk], tuning, seed=seed)
        x = Tensor(gen_random_sequences(batch_size, seq_length, cfg.d_model, seed).embeddings)
        if module == "mha":
            y = attention_sublayer(x, blk, blk.mode)
        elif module == "ffn":
            y = ffn_sublayer(x, blk, blk.mode)
        else:
            y = block_forward(x, blk)
        if backward:
            run_backward(tsum(y))
        del y, x, blk
        gc.collect()
    log.info("profile %s/%s/%s took %.2fs wall-clock", name, tuning, module, time.perf_counter() - started)
    modules = {m: sum(v for k, v in c.by_op.items() if k.split(".")[0] == m) for m in ("mha", "ffn")}
    heads = batch_size * cfg.heads
    config = {
        "name": name,
        "tuning": tuning,
        "module": module,
        "d_lora": d_lora,
        "seq_length": seq_length,
        "batch_size": batch_size,
        "backward": backward,
        "causal": causal,
        "lambda": lam,
        "beta": beta,
        "d_model": cfg.d_model,
        "d_head": cfg.d_head,
        "d_ffn": cfg.d_ffn,
        "heads": cfg.heads,
        "activation": cfg.activation,
        "G": sc.G,
        "G_active": sc.G_active,
        "L": sc.L(seq_length) if tuning == "sparse" else seq_length,
    }
    return ProfileReport(
        config=config,
        seed=seed,
        flops=c.flops,
        module_flops=modules,
        peak_bytes=c.peak_bytes,
        attention_entries=c.attention_entries,
        attention_entries_per_head=c.attention_entries / heads if module != "ffn" else 0.0,
        breakdown=_breakdown(c.by_op, c.flops),
    )


def format_report(r: ProfileReport) -> str:
    """Human-readable table of a report."""
    cfg = r.config
    lines = [
        f"{cfg['name']} tuning={cfg['tuning']} module={cfg['module']} "
        f"batch={cfg['batch_size']} seq={cfg['seq_length']} backward={cfg['backward']}",
        f"{'op':<32}{'flops':>18}{'share %':>10}",
    ]
    for row in r.breakdown:
        lines.append(f"{row['name']:<32}{row['flops']:>18,}{row['share']:>10.2f}")
    lines.append(f"{'total':<32}{r.flops:>18,}")
    lines.append(f"peak bytes: {r.peak_bytes:,} ({r.peak_bytes / 2**20:.1f} MiB)")
    if cfg["module"] != "ffn":
        lines.append(f"stored attention entries: {r.attention_entries:,} ({r.attention_entries_per_head:,.0f} per head)")
    return "\n".join(lines)


def dense_flops_ratio(name: str, beta: float, seq_length: int = 512, batch_size: int = 1, seed: int = 0) -> float:
    """Routed-FFN flops over dense-FFN flops (both with adapters) for a preset."""
    sparse = run_profile(name, "sparse", "ffn", seq_length=seq_length, batch_size=batch_size, beta=beta, seed=seed)
    dense = run_profile(name, "lora", "ffn", seq_length=seq_length, batch_size=batch_size, beta=beta, seed=seed)
    return sparse.module_flops["ffn"] / dense.module_flops["ffn"]


def attention_saving(n: int, lam: float) -> float:
    """Fraction of dense attention storage saved by uniform top-L selection."""
    L = SparsityConfig(lam=lam).L(n)
    return 1.0 - (n * L) / float(n * n)

