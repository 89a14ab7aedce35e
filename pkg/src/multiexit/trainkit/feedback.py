"""Stage-local learning with fixed random heads and a separate random feedback path.

Exit ``i`` predicts ``softmax(h_i M_i)`` with ``M_i`` random and frozen.  The
error at that head is sent back through a second random matrix ``K_i``
instead of ``M_i``, so stage ``i`` learns from a purely local signal; its
input is detached and nothing flows into earlier stages.  The last stage is
an ordinary classifier trained on its own loss, again from a detached input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exitnet import MultiExitNetwork
from ..numcore import Tensor, cross_entropy, softmax
from ..numcore.blocks import glorot_uniform


@dataclass(frozen=True)
class RandomFeedbackPair:
    forward: np.ndarray   # M
    feedback: np.ndarray  # K


def setup_feedback(net: MultiExitNetwork, seed: int, tied: bool = False) -> dict[int, RandomFeedbackPair]:
    """Draw ``(M, K)`` per exit and install ``M`` (zero bias) as that exit's head."""
    rng = np.random.default_rng([seed, 7919])
    pairs = {}
    for i in net.exits:
        head = net.heads[i]
        dense_blocks = [b for b in head.blocks if b.kind == "dense"]
        if len(dense_blocks) != 1:
            raise ValueError(f"head {i}: local feedback needs a single linear head")
        w = dense_blocks[0].params["weight"]
        M = glorot_uniform(rng, *w.shape)
        K = M.copy() if tied else glorot_uniform(rng, *w.shape)
        w.data = M.copy()
        dense_blocks[0].params["bias"].data = np.zeros_like(dense_blocks[0].params["bias"].data)
        pairs[i] = RandomFeedbackPair(M, K)
    return pairs


def local_delta(h: np.ndarray, y: np.ndarray, pair: RandomFeedbackPair) -> np.ndarray:
    """Error signal at ``h`` for the mean cross-entropy of ``softmax(h M)``, routed through ``K``."""
    p = softmax(Tensor(h @ pair.forward)).data
    err = p.copy()
    err[np.arange(len(y)), y] -= 1.0
    return (err / len(y)) @ pair.feedback.T


def feedback_step(net: MultiExitNetwork, pairs: dict[int, RandomFeedbackPair], x, y):
    """Surrogate objective whose gradient is the local update of every stage.

    For stage ``i < L`` the surrogate is ``sum(h_i * delta_i)`` with
    ``delta_i`` a constant, so d/dtheta_i equals ``delta_i`` pulled back
    through stage ``i`` only.
    """
    a = np.asarray(x, dtype=np.float64)
    L = net.depth
    total = None
    parts = {}
    for i in range(1, L + 1):
        h = net.forward_stage(i, Tensor(a))
        if i < L:
            delta = local_delta(h.data, y, pairs[i])
            term = (h * Tensor(delta)).sum()
            with np.errstate(divide="ignore"):
                parts[i] = cross_entropy(softmax(Tensor(h.data @ pairs[i].forward)), y)
        else:
            term = cross_entropy(h, y)
            parts[i] = term
        total = term if total is None else total + term
        a = h.data
    return total, parts
