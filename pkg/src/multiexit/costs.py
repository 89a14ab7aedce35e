"""Static MAC accounting for stages, heads and gates."""
from __future__ import annotations

import numpy as np

from .exitnet import MultiExitNetwork


def stage_costs(net: MultiExitNetwork) -> np.ndarray:
    return np.array([s.macs for s in net.stages], dtype=np.float64)


def head_costs(net: MultiExitNetwork, with_gates: bool = False) -> dict[int, float]:
    out = {}
    for i in net.exits:
        c = float(net.heads[i].macs)
        if with_gates and i in net.gates:
            c += net.gates[i].macs
        out[i] = c
    return out


def incremental_exit_costs(net: MultiExitNetwork, evaluated_heads=None,
                           with_gates: bool = False) -> np.ndarray:
    """Cost of going from one exit to the next, one entry per ``net.exit_ids``.

    Entry ``j`` covers the stages after the previous exit up to exit ``j``
    plus head ``j`` when it is evaluated.  ``evaluated_heads`` defaults to
    every early exit.
    """
    sc = stage_costs(net)
    hc = head_costs(net, with_gates)
    evaluated = set(net.exits if evaluated_heads is None else evaluated_heads)
    eps = []
    prev = 0
    for i in net.exit_ids:
        c = float(sc[prev:i].sum())
        if i in hc and i in evaluated:
            c += hc[i]
        eps.append(c)
        prev = i
    return np.asarray(eps)


def full_cost(net: MultiExitNetwork) -> float:
    """Cost of the plain backbone pass (no heads)."""
    return float(stage_costs(net).sum())
