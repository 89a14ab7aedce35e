from __future__ import annotations

import math
from typing import Sequence


def freezeout_rate(t: int, t_freeze: float, eta0: float) -> float:
    """Cosine-annealed rate ``0.5 * eta0 * (1 + cos(pi t / t_freeze))``, zero from ``t_freeze`` on."""
    if t_freeze <= 0:
        raise ValueError("freeze point must be positive")
    if t >= t_freeze:
        return 0.0
    return 0.5 * eta0 * (1.0 + math.cos(math.pi * t / t_freeze))


def equispaced_freeze_points(num_stages: int, total_iterations: int) -> list[float]:
    """``t_i = i * T / L`` for ``i = 1..L``; the last stage freezes at ``T``."""
    return [i * total_iterations / num_stages for i in range(1, num_stages + 1)]


def freezeout_schedule(i: int, t: int, freeze_points: Sequence[float], eta0: float) -> float:
    """Learning rate of stage ``i`` (1-based) at iteration ``t``."""
    return freezeout_rate(t, freeze_points[i - 1], eta0)
