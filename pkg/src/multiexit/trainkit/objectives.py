"""Differentiable training objectives for multi-exit networks.

Each objective returns ``(total, parts)`` where ``parts`` maps an exit index
to the loss term attributed to it, so a non-finite total can be traced back
to the first offending exit.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..exitnet import MultiExitNetwork, forward_all_exits
from ..numcore import Tensor, cross_entropy, softmax


def joint_objective(net: MultiExitNetwork, x, y, alphas: Sequence[float]):
    """Final loss plus the alpha-weighted companion losses of every early exit."""
    trace = forward_all_exits(net, x)
    L = net.depth
    parts = {L: cross_entropy(trace.predictions[L], y)}
    total = parts[L]
    for a, i in zip(alphas, net.exits):
        parts[i] = cross_entropy(trace.predictions[i], y)
        total = total + float(a) * parts[i]
    return total, parts


def combination_weights(raw: Tensor, mode: str) -> Tensor:
    return softmax(raw) if mode == "softmax" else raw


def combined_output(preds: Sequence[Tensor], weights: Tensor) -> Tensor:
    """``sum_k w_k * pred_k`` with ``preds`` ordered early exits first, final last."""
    out = weights[0] * preds[0]
    for k in range(1, len(preds)):
        out = out + weights[k] * preds[k]
    return out


def combined_objective(net: MultiExitNetwork, x, y, raw: Tensor, mode: str):
    trace = forward_all_exits(net, x)
    preds = [trace.predictions[i] for i in net.exit_ids]
    yhat = combined_output(preds, combination_weights(raw, mode))
    loss = cross_entropy(yhat, y)
    return loss, {net.depth: loss}


def recursive_output(preds: Sequence, gates: Sequence):
    """``c_hat_i = g_i c_i + (1 - g_i) c_hat_{i+1}``, base case the final prediction.

    ``preds`` has one more entry than ``gates``; its last entry is ``f(x)``.
    Works on Tensors or plain arrays.
    """
    out = preds[-1]
    for g, c in zip(reversed(gates), reversed(preds[:-1])):
        out = g * c + (1.0 - g) * out
    return out


def exit_distribution(gates: Sequence):
    """Soft probability of stopping at each exit, plus the mass left for the final one.

    ``p_j = g_j * prod_{l<j} (1 - g_l)``; the remainder is ``prod_l (1 - g_l)``.
    """
    probs = []
    survive = None
    for g in gates:
        probs.append(g if survive is None else g * survive)
        survive = (1.0 - g) if survive is None else survive * (1.0 - g)
    if survive is None:
        survive = 1.0
    return probs, survive


def expanded_output(preds: Sequence, gates: Sequence):
    probs, rest = exit_distribution(gates)
    out = rest * preds[-1]
    for p, c in zip(probs, preds[:-1]):
        out = out + p * c
    return out


def _gated_parts(net: MultiExitNetwork, x):
    missing = [i for i in net.exits if i not in net.gates]
    if missing:
        from .config import ConfigError
        raise ConfigError(f"exits {missing} have no gate")
    trace = forward_all_exits(net, x)
    preds = [trace.predictions[i] for i in net.exit_ids]
    gates = [trace.gates[i] for i in net.exits]
    return preds, gates


def gated_objective(net: MultiExitNetwork, x, y):
    preds, gates = _gated_parts(net, x)
    loss = cross_entropy(recursive_output(preds, gates), y)
    return loss, {net.depth: loss}


def cumulative_costs(incremental: Sequence[float]) -> np.ndarray:
    return np.cumsum(np.asarray(incremental, dtype=np.float64))


def soft_cost(gates: Sequence[Tensor], cumulative: np.ndarray) -> Tensor:
    """Mean over samples of ``sum_j p_ij * cost_j``, final exit taking the remainder."""
    probs, rest = exit_distribution(gates)
    total = rest * float(cumulative[-1])
    for p, c in zip(probs, cumulative[:-1]):
        total = total + p * float(c)
    return total.mean()


def cost_objective(net: MultiExitNetwork, x, y, cumulative: np.ndarray, strength: float):
    preds, gates = _gated_parts(net, x)
    task = cross_entropy(recursive_output(preds, gates), y)
    cost = soft_cost(gates, cumulative)
    return task + float(strength) * cost, {net.depth: task, 0: cost}
