from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .tensor import ContractError, Tensor

Schedule = Callable[[int], float]


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float | Schedule
    name: str = ""

    def rate(self, t: int) -> float:
        return float(self.lr(t)) if callable(self.lr) else float(self.lr)


@dataclass
class SgdOptimizer:
    """Plain SGD over parameter groups, each with its own rate or schedule.

    ``t`` counts completed steps; a schedule is called with the 0-based index
    of the step being taken.
    """

    groups: list[ParamGroup]
    t: int = 0
    last_rates: list[float] = field(default_factory=list)

    def step(self) -> None:
        rates = []
        for group in self.groups:
            lr = group.rate(self.t)
            rates.append(lr)
            if lr < 0:
                raise ContractError(f"group {group.name!r}: negative learning rate {lr}")
            for p in group.params:
                if p.grad is None:
                    raise ContractError(
                        f"group {group.name!r}: parameter {p.name!r} has no gradient")
            if lr == 0.0:
                continue
            for p in group.params:
                p.data -= lr * p.grad
        self.last_rates = rates
        self.t += 1

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.grad = None


def inverse_time(eta0: float = 1.0) -> Schedule:
    """``eta0 / t`` with 1-based iteration numbering."""
    return lambda t: eta0 / (t + 1)


def param_hash(params: Iterable[Tensor]) -> str:
    """SHA-256 over shapes and raw little-endian float64 bytes."""
    h = hashlib.sha256()
    for p in params:
        h.update(repr(p.shape).encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()
