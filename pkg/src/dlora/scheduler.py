"""Kill-and-Revive scheduling over per-module L2-norm changes.

The cloud keeps a history of module norms reported by the edge. After the
warm-up epoch and after every training epoch it turns the latest pair of norm
vectors into relative changes and keeps the ``budget`` modules with the
largest scores active. In KR mode a module that sat the epoch out keeps the
score from the last epoch it trained, which is what lets it come back.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

from .peft import Status

INF = math.inf


class Mode(enum.IntEnum):
    FT = 0
    EK = 1
    KR = 2


class SchedulerError(RuntimeError):
    pass


def diff_relative(prev: Sequence[float], cur: Sequence[float]) -> list[float]:
    """``|prev - cur| / prev`` elementwise; ``0/0 -> 0`` and ``x/0 -> inf``."""
    if len(prev) != len(cur):
        raise ValueError(f"length mismatch: {len(prev)} vs {len(cur)}")
    out = []
    for p, c in zip(prev, cur):
        change = abs(p - c)
        if p == 0:
            out.append(0.0 if change == 0 else INF)
        else:
            out.append(change / p)
    return out


def select_active(scores: Sequence[float], budget: int, eligible: Sequence[bool] | None = None) -> list[Status]:
    """Keep the ``budget`` highest scores active; ties go to the lower index.

    With ``eligible`` given, only those modules compete (Early-Kill never
    revives).
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    n = len(scores)
    pool = [i for i in range(n) if eligible is None or eligible[i]]
    ranked = sorted(pool, key=lambda i: (-scores[i], i))
    keep = set(ranked[:budget])
    return [Status.ACTIVE if i in keep else Status.KILLED for i in range(n)]


def carry_forward(d_new: Sequence[float], d_prev: Sequence[float], status: Sequence[Status]) -> list[float]:
    """Killed modules inherit their previous score; active ones take the fresh one."""
    if not len(d_new) == len(d_prev) == len(status):
        raise ValueError("carry_forward inputs differ in length")
    return [p if s == Status.KILLED else n for n, p, s in zip(d_new, d_prev, status)]


@dataclass
class KRState:
    """Norm history ``N``, score history ``D`` and the current assignment."""

    n_layers: int
    budget: int
    mode: Mode = Mode.KR
    pretune_steps: int = 0
    norms: list[list[float]] = field(default_factory=list)
    scores: list[list[float]] = field(default_factory=list)
    status: list[Status] = field(default_factory=list)
    epoch: int = 0

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        if not 1 <= self.budget:
            raise ValueError("budget must be >= 1")
        if self.mode is not Mode.FT and self.budget > self.n_layers:
            self.budget = self.n_layers
        if not self.status:
            self.status = [Status.ACTIVE] * self.n_layers

    @property
    def n_active(self) -> int:
        return sum(1 for s in self.status if s == Status.ACTIVE)

    def pretune_done(self, norms_before: Sequence[float], norms_after: Sequence[float]) -> list[Status]:
        """Record the warm-up norms, derive the first score row and select."""
        if self.mode is Mode.FT:
            raise SchedulerError("no pre-tuning phase in FT mode")
        self.norms = [list(norms_before), list(norms_after)]
        d0 = diff_relative(norms_before, norms_after)
        self.scores = [d0]
        self.status = select_active(d0, self.budget)
        return list(self.status)

    def epoch_transition(self, norms_pre: Sequence[float], norms_post: Sequence[float]) -> list[Status]:
        """Close one training epoch and pick the assignment for the next."""
        if self.mode is Mode.FT:
            raise SchedulerError("epoch_transition called in FT mode")
        if len(norms_pre) != self.n_layers or len(norms_post) != self.n_layers:
            raise ValueError("norm vectors must have one entry per layer")
        d_new = diff_relative(norms_pre, norms_post)
        self.norms.extend([list(norms_pre), list(norms_post)])
        if self.mode is Mode.KR:
            prev = self.scores[-1] if self.scores else [0.0] * self.n_layers
            row = carry_forward(d_new, prev, self.status)
            self.status = select_active(row, self.budget)
        else:
            row = d_new
            eligible = [s == Status.ACTIVE for s in self.status]
            self.status = select_active(row, self.budget, eligible)
        self.scores.append(row)
        self.epoch += 1
        return list(self.status)
