"""Cost profiles and early-exit placement.

A profile describes a backbone of ``L`` stages: the cost of each stage
alone, the cost of a candidate head after each of the first ``L - 1``
stages, and ``I_i``, the fraction of samples still running when position
``i`` is reached (``I_1 = 1``).  All indices are 1-based.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exitnet import MultiExitNetwork
from .io import read_csv, write_csv


class PlacementRefused(ValueError):
    pass


@dataclass
class CostProfile:
    gamma_f: np.ndarray
    gamma_c: np.ndarray
    reach: np.ndarray | None = None

    def __post_init__(self):
        self.gamma_f = np.asarray(self.gamma_f, dtype=np.float64)
        self.gamma_c = np.asarray(self.gamma_c, dtype=np.float64)
        L = len(self.gamma_f)
        if len(self.gamma_c) == L:
            self.gamma_c = self.gamma_c[:L - 1]
        if len(self.gamma_c) != L - 1:
            raise ValueError(f"need {L - 1} head costs for {L} stages, got {len(self.gamma_c)}")
        if self.reach is not None:
            self.reach = np.asarray(self.reach, dtype=np.float64)
            if len(self.reach) != L:
                raise ValueError(f"need {L} exit fractions, got {len(self.reach)}")
            if np.any((self.reach < 0) | (self.reach > 1)):
                raise ValueError("exit fractions must lie in [0, 1]")

    @property
    def depth(self) -> int:
        return len(self.gamma_f)

    @property
    def gamma(self) -> np.ndarray:
        """Cumulative cost of running the backbone up to each position."""
        return np.cumsum(self.gamma_f)

    def compression(self, i: int) -> float:
        """``I_{i+1} / I_i``; 1 when no sample reaches ``i``."""
        I = self._I()
        return 1.0 if I[i - 1] == 0 else float(I[i] / I[i - 1])

    def _I(self) -> np.ndarray:
        if self.reach is None:
            raise ValueError("profile has no exit fractions")
        return self.reach

    def with_reach(self, reach) -> "CostProfile":
        return CostProfile(self.gamma_f, self.gamma_c, reach)


def static_cost_profile(net: MultiExitNetwork, head_costs: dict[int, float] | None = None
                        ) -> CostProfile:
    """MAC-based profile of a network (fractions left unset).

    Positions without an attached head get the cost of the network's first
    head shape if one exists, else a single linear classifier.
    """
    gamma_f = [s.macs for s in net.stages]
    costs = []
    for i in range(1, net.depth):
        if head_costs and i in head_costs:
            costs.append(head_costs[i])
        elif i in net.heads:
            costs.append(net.heads[i].macs)
        else:
            w = net.stages[i - 1].out_dim
            costs.append(w * net.num_classes + net.num_classes)
    return CostProfile(np.asarray(gamma_f), np.asarray(costs, dtype=np.float64))


def measure_exit_fractions(net: MultiExitNetwork, policy, X) -> np.ndarray:
    """Fraction of samples reaching each backbone position ``1..L`` under ``policy``.

    Positions with no head inherit the fraction of the next exit at or after them.
    """
    from .inferkit import run_adaptive_inference

    ledger = run_adaptive_inference(net, policy, X).ledger
    exit_ids = np.asarray(net.exit_ids)
    reach = ledger.reach_fraction
    # nobody stops between exits, so position p sees the traffic of the first exit at or after p
    nxt = np.searchsorted(exit_ids, np.arange(1, net.depth + 1))
    return reach[nxt].astype(np.float64)


# ---------------------------------------------------------------- decision rules


def efficiency_test(profile: CostProfile, i: int) -> bool:
    """Whether an exit at ``i`` pays for itself: ``(g_{i+1}-g_i)(I_i-I_{i+1}) > g_i I_{i+1}``."""
    g = profile.gamma
    I = profile._I()
    return bool((g[i] - g[i - 1]) * (I[i - 1] - I[i]) > g[i - 1] * I[i])


def greedy_lhs(profile: CostProfile, i: int, th: float) -> float:
    cm = profile.compression(i)
    return float((th - cm) * profile.gamma_f[i] - (1.0 - cm) * profile.gamma_c[i - 1]
                 - (1.0 - th) * profile.gamma_f[i - 1])


@dataclass
class PlacementPlan:
    exits: list[int]
    decisions: list[dict] = field(default_factory=list)
    th: float | None = None
    strategy: str = "greedy"
    cost: float | None = None


def greedy_placement(profile: CostProfile, th: float) -> PlacementPlan:
    """Scan positions front to back; keep ``i`` when the thresholded gain is nonnegative."""
    if not 0.0 <= th <= 1.0:
        raise ValueError(f"TH must lie in [0, 1], got {th}")
    kept, decisions = [], []
    for i in range(1, profile.depth):
        lhs = greedy_lhs(profile, i, th)
        keep = lhs >= 0
        decisions.append({"index": i, "rule": "greedy", "lhs": lhs,
                          "cm": profile.compression(i), "kept": bool(keep)})
        if keep:
            kept.append(i)
    return PlacementPlan(kept, decisions, th, "greedy", expected_cost(profile, kept))


def expected_cost(profile: CostProfile, exits: Sequence[int]) -> float:
    """Mean per-sample cost when only ``exits`` are attached.

    A sample that would stop at a removed exit keeps going to the next kept
    one, so kept exit ``s_k`` is reached by ``I_{s_{k-1}+1}`` of the traffic.
    Every reached head is paid for.
    """
    I = profile._I()
    gf, gc = profile.gamma_f, profile.gamma_c
    total = 0.0
    prev = 0
    for s in list(exits) + [profile.depth]:
        reach = I[prev]  # I_{prev+1}
        seg = gf[prev:s].sum()
        if s < profile.depth:
            seg += gc[s - 1]
        total += reach * seg
        prev = s
    return float(total)


def exhaustive_placement(profile: CostProfile, max_exits: int | None = None,
                         objective=None, max_depth: int = 20) -> PlacementPlan:
    """Best subset of at most ``max_exits`` positions by enumeration.

    Ties go to fewer exits, then lexicographically smaller indices.
    """
    L = profile.depth
    if L > max_depth:
        raise PlacementRefused(f"depth {L} exceeds the enumeration guard ({max_depth})")
    objective = objective or expected_cost
    M = L - 1 if max_exits is None else min(max_exits, L - 1)
    best_key, best = None, ()
    for m in range(M + 1):
        for subset in itertools.combinations(range(1, L), m):
            c = objective(profile, subset)
            key = (c, m, subset)
            if best_key is None or key < best_key:
                best_key, best = key, subset
    decisions = [{"index": i, "rule": "exhaustive", "lhs": None, "kept": i in best}
                 for i in range(1, L)]
    return PlacementPlan(list(best), decisions, None, "exhaustive", best_key[0])


def percentile_placement(profile: CostProfile, percentiles: Sequence[float]) -> list[int]:
    """Per percentile ``p``: the first position whose cumulative cost reaches ``p`` of the total.

    Positions landing on the final stage are dropped (that exit always exists).
    """
    g = profile.gamma
    total = g[-1]
    out = []
    prev = 0.0
    for p in percentiles:
        if not 0.0 < p < 1.0 or p <= prev:
            raise ValueError("percentiles must be increasing and inside (0, 1)")
        prev = p
        target = p * total
        i = int(np.argmax(g >= target * (1 - 1e-12))) + 1
        if i < profile.depth and i not in out:
            out.append(i)
    return out


def prune_constant_heads(net: MultiExitNetwork, X, y, tolerance: float = 0.005) -> list[int]:
    """Exits whose head is no better than predicting the majority class (within ``tolerance``)."""
    from .inferkit import ExitTable

    y = np.asarray(y)
    table = ExitTable.build(net, X, y)
    majority = np.bincount(y, minlength=net.num_classes).max() / len(y)
    drop = []
    for k, i in enumerate(net.exits):
        if table.correct[:, k].mean() <= majority + tolerance:
            drop.append(i)
    return drop


# ---------------------------------------------------------------- profile CSV


def write_profile(profile: CostProfile, path) -> Path:
    L = profile.depth
    I = profile.reach if profile.reach is not None else np.full(L, np.nan)
    rows = [(i, float(profile.gamma_f[i - 1]),
             float(profile.gamma_c[i - 1]) if i < L else 0.0, float(I[i - 1]))
            for i in range(1, L + 1)]
    return write_csv(path, ["index", "gamma_f", "gamma_c", "I"], rows)


def read_profile(path) -> CostProfile:
    rows = read_csv(path)
    if not rows:
        raise ValueError(f"{path}: empty profile")
    missing = {"index", "gamma_f", "gamma_c", "I"} - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    rows.sort(key=lambda r: int(r["index"]))
    if [int(r["index"]) for r in rows] != list(range(1, len(rows) + 1)):
        raise ValueError(f"{path}: indices must run 1..L")
    gf = [float(r["gamma_f"]) for r in rows]
    gc = [float(r["gamma_c"]) for r in rows][:-1]
    I = [float(r["I"]) for r in rows]
    return CostProfile(gf, gc, None if any(np.isnan(I)) else I)
