"""Sparsity knobs, block shapes, and the named block presets."""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .pq import subspace_widths

CAUSAL_MODES = ("prefilter", "softmax")


@dataclass(frozen=True)
class SparsityConfig:
    """How hard to sparsify.

    ``lam`` is the kept fraction of attention weights per query
    (``L = max(1, floor(lam * n))``) and ``beta`` the active fraction of FFN
    weight groups (``G' = max(1, round(beta * G))``).
    """

    lam: float = 0.125
    beta: float = 0.5
    G: int = 4
    E: int = 16
    d_sub: int = 8
    lora_rank: int = 16
    codebook_period: int = 20
    causal_mode: str = "prefilter"
    scan_order: str = "descending"
    scale_scores: bool = False
    gated: bool = True
    balance_coef: float = 0.01

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ConfigError(f"lambda must be in (0, 1], got {self.lam}")
        if not 0 < self.beta <= 1:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}")
        if self.G < 1 or self.E < 1 or self.d_sub < 1 or self.lora_rank < 1:
            raise ConfigError("G, E, d_sub and lora_rank must be positive")
        if self.codebook_period < 1:
            raise ConfigError("codebook_period must be >= 1")
        if self.causal_mode not in CAUSAL_MODES:
            raise ConfigError(f"causal_mode must be one of {CAUSAL_MODES}")
        if self.scan_order not in ("descending", "ascending"):
            raise ConfigError("scan_order must be 'descending' or 'ascending'")

    def L(self, n: int) -> int:
        return max(1, int(math.floor(self.lam * n + 1e-9)))

    @property
    def G_active(self) -> int:
        return max(1, int(math.floor(self.beta * self.G + 0.5)))

    def M(self, d_head: int) -> int:
        return len(subspace_widths(d_head, self.d_sub))

    def with_(self, **kw) -> "SparsityConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class BlockConfig:
    d_model: int
    d_head: int
    d_ffn: int
    activation: str = "relu"
    causal: bool = True
    name: str = "custom"
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)

    def __post_init__(self):
        if min(self.d_model, self.d_head, self.d_ffn) < 1:
            raise ConfigError("dimensions must be positive")
        if self.d_model % self.d_head:
            raise ConfigError(f"d_model {self.d_model} not divisible by d_head {self.d_head}")
        if self.d_ffn % self.sparsity.G:
            raise ConfigError(f"d_ffn {self.d_ffn} not divisible by G={self.sparsity.G}")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.sparsity.G_active > self.sparsity.G:
            raise ConfigError("G' exceeds G")

    @property
    def heads(self) -> int:
        return self.d_model // self.d_head

    def with_(self, **kw) -> "BlockConfig":
        return replace(self, **kw)


def load_presets(path: str | Path | None = None) -> dict[str, BlockConfig]:
    """Read ``[name]`` sections with d_model/d_head/d_ffn/activation keys."""
    parser = configparser.ConfigParser()
    if path is None:
        parser.read_string(resources.files(__package__).joinpath("presets.ini").read_text())
    else:
        with open(path) as fh:
            parser.read_file(fh)
    out = {}
    for name in parser.sections():
        sec = parser[name]
        try:
            out[name] = BlockConfig(
                d_model=sec.getint("d_model"),
                d_head=sec.getint("d_head"),
                d_ffn=sec.getint("d_ffn"),
                activation=sec.get("activation", "relu"),
                name=name,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"preset {name!r}: {exc}") from exc
    return out


def preset(name: str, sparsity: SparsityConfig | None = None, **kw) -> BlockConfig:
    table = load_presets()
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(table)}")
    cfg = table[name]
    if sparsity is not None:
        kw["sparsity"] = sparsity
    return cfg.with_(**kw) if kw else cfg
