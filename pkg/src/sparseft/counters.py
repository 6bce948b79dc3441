"""Deterministic cost accounting.

Every matrix product reports its multiply-add pairs here and every tensor
buffer reports its bytes on allocation and release. Counters only see events
that happen while they are active, so scopes nest freely and measuring one
piece of a computation never disturbs an enclosing measurement.

Elementwise work is deliberately not counted: the convention is GEMM-like
multiply-add pairs only.
"""
from __future__ import annotations

import contextvars
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator

_ACTIVE: contextvars.ContextVar[tuple["CostCounters", ...]] = contextvars.ContextVar(
    "sparseft_active_counters", default=()
)
_LABEL: contextvars.ContextVar[str] = contextvars.ContextVar("sparseft_label", default="")


@dataclass
class CostCounters:
    """Flop and live-byte totals for one measurement scope.

    ``by_op`` breaks ``flops`` down by ``"<label>.<op>"`` names; its values
    always sum to ``flops``.
    """

    flops: int = 0
    peak_bytes: int = 0
    current_bytes: int = 0
    attention_entries: int = 0
    by_op: dict[str, int] = field(default_factory=dict)
    closed: bool = False

    def as_dict(self) -> dict[str, Any]:
        return {
            "flops": self.flops,
            "peak_bytes": self.peak_bytes,
            "current_bytes": self.current_bytes,
            "attention_entries": self.attention_entries,
            "by_op": dict(sorted(self.by_op.items())),
        }


def current_label() -> str:
    return _LABEL.get()


def record_flops(op: str, n: int, label: str | None = None) -> None:
    """Add ``n`` multiply-add pairs under ``op`` to every active counter."""
    active = _ACTIVE.get()
    if not active or n == 0:
        return
    lab = _LABEL.get() if label is None else label
    name = f"{lab}.{op}" if lab else op
    n = int(n)
    for c in active:
        c.flops += n
        c.by_op[name] = c.by_op.get(name, 0) + n


def record_attention_entries(n: int) -> None:
    for c in _ACTIVE.get():
        c.attention_entries += int(n)


def _release(owners: tuple[CostCounters, ...], nbytes: int) -> None:
    for c in owners:
        if not c.closed:
            c.current_bytes -= nbytes


def track(obj: object, nbytes: int) -> None:
    """Count ``nbytes`` as live until ``obj`` is garbage collected."""
    active = _ACTIVE.get()
    if not active or nbytes == 0:
        return
    for c in active:
        c.current_bytes += nbytes
        if c.current_bytes > c.peak_bytes:
            c.peak_bytes = c.current_bytes
    weakref.finalize(obj, _release, active, nbytes)


@contextmanager
def counting() -> Iterator[CostCounters]:
    """Collect costs of the enclosed block into a fresh ``CostCounters``."""
    c = CostCounters()
    token = _ACTIVE.set(_ACTIVE.get() + (c,))
    try:
        yield c
    finally:
        _ACTIVE.reset(token)
        c.closed = True


@contextmanager
def annotate(label: str) -> Iterator[None]:
    """Prefix op names recorded inside the block with ``label``."""
    parent = _LABEL.get()
    token = _LABEL.set(f"{parent}.{label}" if parent else label)
    try:
        yield
    finally:
        _LABEL.reset(token)


def counters_scope(f: Callable[..., Any], *args: Any, **kwargs: Any) -> tuple[Any, CostCounters]:
    """Run ``f`` and return its result with the costs it incurred."""
    with counting() as c:
        result = f(*args, **kwargs)
    return result, c
