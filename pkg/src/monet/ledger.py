"""Operation ledger: MAC/FLOP accounting and a full op census for audits.

Kernels report what they did through `record(kind, n)`. Only two kinds carry
FLOP weight, matching the operator-level counting convention used for the
closed-form cost model:

  * ``mac`` - one multiply-accumulate inside a matmul/conv (weight 1)
  * ``mul`` - one standalone elementwise multiply, e.g. a Hadamard product
    (weight 1)

Everything else (plain adds, divides, sqrts, comparisons, ...) is counted in
the census with zero FLOP weight. Records made inside a
``record(..., multilinear=False)`` call (layer normalization internals) are
kept out of the multilinear FLOP totals but still show up in the census.

A ledger is active only inside `capture()`; kernels run unrecorded otherwise.
Scopes are hierarchical path strings ("blocks.3.layer1.A") pushed with
`scope()`.
"""

from __future__ import annotations

import contextvars
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

FLOP_KINDS = ("mac", "mul")
CENSUS_KINDS = ("add", "mul", "mac", "div", "sqrt", "cmp", "other")


@dataclass
class OpLedger:
    # (scope, kind, multilinear) -> count
    counts: dict = field(default_factory=lambda: defaultdict(int))
    _scope_stack: list = field(default_factory=list)

    def record(self, kind: str, n: int, multilinear: bool = True) -> None:
        if kind not in CENSUS_KINDS:
            raise ValueError(f"unknown op kind {kind!r}")
        scope = ".".join(self._scope_stack)
        self.counts[(scope, kind, multilinear)] += int(n)

    # -- queries ----------------------------------------------------------

    def flops_total(self) -> int:
        return sum(
            n
            for (_, kind, ml), n in self.counts.items()
            if ml and kind in FLOP_KINDS
        )

    def flops_by_scope(self, depth: int | None = None) -> dict[str, int]:
        """Multilinear FLOPs keyed by scope, optionally truncated to `depth`."""
        out: dict[str, int] = defaultdict(int)
        for (scope, kind, ml), n in self.counts.items():
            if not ml or kind not in FLOP_KINDS:
                continue
            key = scope if depth is None else ".".join(scope.split(".")[:depth])
            out[key] += n
        return dict(out)

    def non_multilinear_flops(self) -> int:
        return sum(
            n
            for (_, kind, ml), n in self.counts.items()
            if not ml and kind in FLOP_KINDS
        )

    def census(self) -> dict[str, int]:
        out = {k: 0 for k in CENSUS_KINDS}
        for (_, kind, _ml), n in self.counts.items():
            out[kind] += n
        return out

    def scopes_with(self, kinds: tuple[str, ...]) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for (scope, kind, _ml), n in self.counts.items():
            if kind in kinds and n:
                out[scope] += n
        return dict(out)


_active: contextvars.ContextVar[OpLedger | None] = contextvars.ContextVar(
    "monet_ledger", default=None
)


def active() -> OpLedger | None:
    return _active.get()


def record(kind: str, n: int, multilinear: bool = True) -> None:
    led = _active.get()
    if led is not None and n:
        led.record(kind, n, multilinear)


@contextmanager
def capture():
    """Activate a fresh ledger for the enclosed kernel calls."""
    led = OpLedger()
    token = _active.set(led)
    try:
        yield led
    finally:
        _active.reset(token)


@contextmanager
def scope(name: str):
    """Push a scope segment; no-op when no ledger is active."""
    led = _active.get()
    if led is None:
        yield
        return
    led._scope_stack.append(str(name))
    try:
        yield
    finally:
        led._scope_stack.pop()
