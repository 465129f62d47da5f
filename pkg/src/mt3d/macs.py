"""Opt-in multiply-accumulate tally for instrumented runs.

Hot paths call :func:`add` at every dense contraction. Outside a
:func:`counting` block the call is a cheap no-op.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from contextvars import ContextVar

_active: ContextVar[Counter | None] = ContextVar("mt3d_macs", default=None)


def add(n: int, tag: str = "other") -> None:
    tally = _active.get()
    if tally is not None:
        tally[tag] += int(n)


@contextlib.contextmanager
def counting():
    """Yield a Counter of MACs per tag accumulated inside the block."""
    tally: Counter = Counter()
    token = _active.set(tally)
    try:
        yield tally
    finally:
        _active.reset(token)
