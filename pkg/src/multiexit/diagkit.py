"""Diagnostics: paired convergence runs and binned mutual-information estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exitnet import MultiExitNetwork, forward_all_exits
from .io import write_csv
from .numcore import cross_entropy, no_grad, param_hash
from .trainkit import STRATEGIES, TrainingConfig


# ---------------------------------------------------------------- convergence


@dataclass
class ConvergenceRecord:
    strategy: str
    seed: int
    losses: list[float]            # final-exit training loss after each iteration
    iterations_to_target: int      # T + 1 when the target is never reached
    init_hash: str

    @property
    def reached(self) -> bool:
        return self.iterations_to_target <= len(self.losses)


def iterations_to_target(losses: Sequence[float], target: float) -> int:
    for t, v in enumerate(losses, 1):
        if v <= target:
            return t
    return len(losses) + 1


def convergence_compare(make_net: Callable[[int], MultiExitNetwork], X, y,
                        configs: dict[str, TrainingConfig], target_loss: float,
                        seeds: Sequence[int]) -> list[ConvergenceRecord]:
    """Train every labelled config from the same initial network, once per seed.

    ``make_net(seed)`` builds the starting point; each strategy gets its own
    copy, and the config seed is replaced by the run seed so batch order is
    paired too.  The loss is measured on the full training set after every step.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    records = []
    for seed in seeds:
        base = make_net(seed)
        h0 = param_hash(base.backbone_parameters())
        for label, cfg in configs.items():
            net = base.copy()
            if param_hash(net.backbone_parameters()) != h0:
                raise RuntimeError("paired runs must start from identical parameters")
            losses: list[float] = []

            def record(_t, n, losses=losses):
                with no_grad():
                    out = forward_all_exits(n, X).predictions[n.depth]
                losses.append(cross_entropy(out, y).item())

            run_cfg = cfg.model_copy(update={"seed": seed})
            STRATEGIES[run_cfg.strategy](net, X, y, run_cfg, on_step=record)
            records.append(ConvergenceRecord(label, seed, losses,
                                             iterations_to_target(losses, target_loss), h0))
    return records


def median_iterations(records: Sequence[ConvergenceRecord], strategy: str) -> float:
    return float(np.median([r.iterations_to_target for r in records if r.strategy == strategy]))


def write_convergence(records: Sequence[ConvergenceRecord], path) -> Path:
    rows = [(r.strategy, r.seed, t, loss) for r in records for t, loss in enumerate(r.losses, 1)]
    return write_csv(path, ["strategy", "seed", "iteration", "loss"], rows)


# ---------------------------------------------------------------- mutual information


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(len(a), -1)


def _reduce(a: np.ndarray, dims: int = 2) -> np.ndarray:
    """Project onto the leading principal directions when there are more than ``dims`` columns."""
    if a.shape[1] <= dims:
        return a
    centered = a - a.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:dims].T


def _codes(a: np.ndarray, bins: int) -> np.ndarray:
    """One integer symbol per row from equal-width bins on every column."""
    a = _reduce(_as_2d(a))
    code = np.zeros(len(a), dtype=np.int64)
    for col in a.T:
        lo, hi = col.min(), col.max()
        if hi - lo <= 1e-12 * max(1.0, abs(hi), abs(lo)):
            idx = np.zeros(len(col), dtype=np.int64)
        else:
            idx = np.minimum(((col - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
        code = code * bins + idx
    return np.unique(code, return_inverse=True)[1]


def _entropy_bits(counts: np.ndarray, n: int) -> float:
    counts = np.sort(counts[counts > 0])
    p = counts / n
    return -math.fsum(p * np.log2(p))


def estimate_mutual_information(a, b, bins: int = 16) -> float:
    """Plug-in estimate of I(A; B) in bits after equal-width binning.

    Computed as H(A) + H(B) - H(A, B) with sorted summation so that the
    estimate is symmetric in its arguments.  Constant inputs give 0.
    """
    if bins < 2:
        raise ValueError("bins must be at least 2")
    ca, cb = _codes(a, bins), _codes(b, bins)
    if len(ca) != len(cb):
        raise ValueError("samples must have equal counts")
    n = len(ca)
    if n == 0 or ca.max() == 0 or cb.max() == 0:
        return 0.0
    joint = ca * (cb.max() + 1) + cb
    ha = _entropy_bits(np.bincount(ca), n)
    hb = _entropy_bits(np.bincount(cb), n)
    hab = _entropy_bits(np.bincount(joint), n)
    return max(0.0, math.fsum(sorted([ha, hb, -hab])))


@dataclass
class IbPoint:
    exit_index: int
    i_x: float
    i_y: float
    bins: int
    n: int
    note: str = field(default="measured only; no trade-off is optimized")


def ib_plane(net: MultiExitNetwork, X, y, bins: int = 16) -> list[IbPoint]:
    """(I(X; F_i), I(Y; F_i)) for the embedding feeding every exit."""
    with no_grad():
        trace = forward_all_exits(net, X)
    y = np.asarray(y)
    points = []
    for i in net.exit_ids:
        f = trace.embeddings[i].data
        points.append(IbPoint(i, estimate_mutual_information(X, f, bins),
                              estimate_mutual_information(y, f, bins), bins, len(y)))
    return points


def write_ib_points(points: Sequence[IbPoint], path) -> Path:
    rows = [(p.exit_index, p.i_x, p.i_y, p.bins, p.n) for p in points]
    return write_csv(path, ["exit", "I_X", "I_Y", "bins", "n"], rows)
