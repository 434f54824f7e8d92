"""Deterministic operation accounting.

Forward passes report the sizes of the tensors they actually materialize
(attention logits, decode workspaces) into any active counters.  The bench
module predicts the same quantities from closed-form expressions, so the two
routes can be compared exactly.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field


@dataclass
class OpCounter:
    """Accumulates work counted during instrumented forward passes."""

    score_elements: int = 0
    macs: int = 0
    peak_live_elements: int = 0
    detail: dict = field(default_factory=dict)

    def add_scores(self, n: int) -> None:
        self.score_elements += int(n)

    def add_macs(self, n: int) -> None:
        self.macs += int(n)

    def observe_live(self, n: int) -> None:
        self.peak_live_elements = max(self.peak_live_elements, int(n))


_STACK: list[OpCounter] = []


@contextmanager
def count_ops():
    """Activate a counter for the enclosed forward passes."""
    counter = OpCounter()
    _STACK.append(counter)
    try:
        yield counter
    finally:
        _STACK.remove(counter)


def record_scores(n: int) -> None:
    for counter in _STACK:
        counter.add_scores(n)


def record_macs(n: int) -> None:
    for counter in _STACK:
        counter.add_macs(n)


def record_live(n: int) -> None:
    for counter in _STACK:
        counter.observe_live(n)
