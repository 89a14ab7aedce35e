"""Confidence-gated inference, threshold calibration and cost accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .costs import incremental_exit_costs
from .exitnet import MultiExitNetwork, forward_all_exits
from .numcore import ContractError, Tensor, no_grad

PolicyKind = Literal["entropy_threshold", "max_confidence", "learned_gate", "always_final",
                     "fixed_exit"]
BETA_GRID = np.round(np.arange(101) * 0.01, 2)


def normalized_entropy(pred, num_classes: int | None = None) -> np.ndarray | float:
    """Entropy of each probability row divided by ``log C``, with ``0 log 0 = 0``, clamped to [0, 1]."""
    p = np.asarray(pred, dtype=np.float64)
    C = p.shape[-1] if num_classes is None else num_classes
    if C < 2:
        raise ContractError("normalized entropy needs at least two classes")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    h = -terms.sum(axis=-1) / math.log(C)
    h = np.clip(h, 0.0, 1.0)
    return float(h) if np.ndim(h) == 0 else h


@dataclass
class ExitPolicy:
    """Stop-or-continue rule applied at each early exit.

    ``beta`` is one shared threshold or one per early exit (in exit order).
    """

    kind: PolicyKind = "entropy_threshold"
    beta: float | list[float] = 0.5
    cutoff: float = 0.5
    exit: int | None = None

    def __post_init__(self):
        if self.kind in ("entropy_threshold", "max_confidence"):
            betas = self.beta if isinstance(self.beta, (list, tuple, np.ndarray)) else [self.beta]
            if any(not 0.0 <= float(b) <= 1.0 for b in betas):
                raise ValueError(f"thresholds must lie in [0, 1], got {self.beta}")
        if self.kind == "fixed_exit" and self.exit is None:
            raise ValueError("fixed_exit policy needs an exit index")

    def threshold(self, position: int) -> float:
        if isinstance(self.beta, (list, tuple, np.ndarray)):
            return float(self.beta[position])
        return float(self.beta)

    def evaluates_head(self, exit_index: int) -> bool:
        if self.kind == "always_final":
            return False
        if self.kind == "fixed_exit":
            return exit_index == self.exit
        return True

    def uses_gates(self) -> bool:
        return self.kind == "learned_gate"


def decide_exit(policy: ExitPolicy, pred, exit_index: int, position: int,
                gate=None) -> np.ndarray:
    """Boolean stop mask for the rows of ``pred`` at one early exit."""
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    n = p.shape[0]
    if policy.kind == "entropy_threshold":
        return normalized_entropy(p) <= policy.threshold(position)
    if policy.kind == "max_confidence":
        return p.max(axis=1) >= policy.threshold(position)
    if policy.kind == "learned_gate":
        if gate is None:
            raise ContractError(f"exit {exit_index} has no gate for a learned_gate policy")
        return np.asarray(gate, dtype=np.float64).reshape(n) >= policy.cutoff
    if policy.kind == "fixed_exit":
        return np.full(n, exit_index == policy.exit)
    return np.zeros(n, dtype=bool)


@dataclass
class CostLedger:
    """Per-sample exit record and the cost accounting built from it.

    ``delta`` is the one-hot exit indicator (one row per sample, one column
    per exit in ``exit_ids``).  ``eps`` are incremental exit costs and
    ``gamma`` their running sums, so a sample stopping at exit ``j`` costs
    ``gamma[j]``.  ``reach_fraction`` counts samples still running when an
    exit is reached; ``exit_fraction`` counts samples stopping there.
    """

    exit_ids: list[int]
    exit_index: np.ndarray
    eps: np.ndarray
    gamma: np.ndarray = field(init=False)
    delta: np.ndarray = field(init=False)

    def __post_init__(self):
        self.eps = np.asarray(self.eps, dtype=np.float64)
        self.gamma = np.cumsum(self.eps)
        pos = np.searchsorted(self.exit_ids, self.exit_index)
        self.delta = np.zeros((len(self.exit_index), len(self.exit_ids)), dtype=np.int64)
        self.delta[np.arange(len(pos)), pos] = 1

    @property
    def n(self) -> int:
        return len(self.exit_index)

    @property
    def positions(self) -> np.ndarray:
        return self.delta.argmax(axis=1)

    @property
    def per_sample_cost(self) -> np.ndarray:
        return self.gamma[self.positions]

    @property
    def exit_fraction(self) -> np.ndarray:
        return self.delta.sum(axis=0) / max(self.n, 1)

    @property
    def reach_fraction(self) -> np.ndarray:
        counts = self.delta.sum(axis=0)
        reach = counts[::-1].cumsum()[::-1]
        return reach / max(self.n, 1)

    @property
    def average_cost(self) -> float:
        return math.fsum(self.per_sample_cost) / self.n

    def rows(self):
        for k, (e, c) in enumerate(zip(self.exit_index, self.per_sample_cost)):
            yield k, int(e), float(c)


@dataclass
class InferenceResult:
    probabilities: np.ndarray
    exit_index: np.ndarray
    ledger: CostLedger

    @property
    def predictions(self) -> np.ndarray:
        return self.probabilities.argmax(axis=1)

    def accuracy(self, y) -> float:
        return float(np.mean(self.predictions == np.asarray(y)))


def policy_costs(net: MultiExitNetwork, policy: ExitPolicy) -> np.ndarray:
    evaluated = [i for i in net.exits if policy.evaluates_head(i)]
    return incremental_exit_costs(net, evaluated, with_gates=policy.uses_gates())


def run_adaptive_inference(net: MultiExitNetwork, policy: ExitPolicy, X,
                           costs: Sequence[float] | None = None) -> InferenceResult:
    """Cascade every sample through the exits, stopping at the first positive decision.

    Only still-running samples are pushed through each stage.  ``costs``
    overrides the incremental exit costs (e.g. to add communication).
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    C = net.num_classes
    probs = np.zeros((n, C))
    exit_index = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    h = Tensor(X)
    prev = 0
    with no_grad():
        for position, i in enumerate(net.exit_ids):
            if active.size == 0:
                break
            for s in range(prev + 1, i + 1):
                h = net.forward_stage(s, h)
            prev = i
            if i == net.depth:
                probs[active] = h.data
                exit_index[active] = i
                break
            if not policy.evaluates_head(i):
                continue
            logits, p = net.head_forward(i, h)
            gate = None
            if policy.uses_gates():
                if i not in net.gates:
                    raise ContractError(f"exit {i} has no gate")
                gate = net.gates[i](logits, h).data
            stop = decide_exit(policy, p.data, i, position, gate)
            probs[active[stop]] = p.data[stop]
            exit_index[active[stop]] = i
            active = active[~stop]
            h = Tensor(h.data[~stop])
    eps = policy_costs(net, policy) if costs is None else np.asarray(costs, dtype=np.float64)
    if eps.shape != (len(net.exit_ids),):
        raise ValueError(f"need {len(net.exit_ids)} exit costs, got {eps.shape}")
    return InferenceResult(probs, exit_index, CostLedger(net.exit_ids, exit_index, eps))


# ---------------------------------------------------------------- calibration


@dataclass
class ExitTable:
    """Per-sample, per-exit confidence and correctness from one full pass."""

    exit_ids: list[int]
    entropy: np.ndarray      # (n, m); final column unused by policies
    correct: np.ndarray      # (n, m) bool
    argmax: np.ndarray       # (n, m)

    @classmethod
    def build(cls, net: MultiExitNetwork, X, y) -> "ExitTable":
        with no_grad():
            trace = forward_all_exits(net, X)
        preds = [trace.predictions[i].data for i in net.exit_ids]
        am = np.stack([p.argmax(axis=1) for p in preds], axis=1)
        ent = np.stack([normalized_entropy(p) for p in preds], axis=1)
        return cls(net.exit_ids, ent, am == np.asarray(y)[:, None], am)

    def positions(self, betas: Sequence[float]) -> np.ndarray:
        """Exit position chosen per sample by an entropy policy with per-exit ``betas``."""
        m = len(self.exit_ids)
        stop = self.entropy[:, :m - 1] <= np.asarray(betas, dtype=np.float64)[None, :]
        stop = np.concatenate([stop, np.ones((len(stop), 1), dtype=bool)], axis=1)
        return stop.argmax(axis=1)

    def accuracy(self, betas: Sequence[float]) -> float:
        pos = self.positions(betas)
        return float(self.correct[np.arange(len(pos)), pos].mean())


def calibrate_thresholds_per_exit(net: MultiExitNetwork, X, y, budget: float,
                                  grid: Sequence[float] = BETA_GRID) -> list[float]:
    """Largest grid threshold per exit whose stopping samples lose at most ``budget`` accuracy.

    Each exit is judged on its own: the samples it would stop at threshold
    ``b`` must be classified at least as well as the final exit classifies
    them, minus ``budget``.  An empty stopping set always qualifies.
    """
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty validation set")
    table = ExitTable.build(net, X, y)
    final = table.correct[:, -1]
    betas = []
    for k in range(len(table.exit_ids) - 1):
        best = 0.0
        for b in grid:
            sel = table.entropy[:, k] <= b
            if not sel.any() or table.correct[sel, k].mean() >= final[sel].mean() - budget:
                best = max(best, float(b))
        betas.append(best)
    return betas


@dataclass
class CalibrationResult:
    beta: float
    accuracy: float
    feasible: bool
    converged: bool
    iterations: int
    log: list[tuple[float, float]]

    def as_dict(self) -> dict:
        return {"beta": self.beta, "accuracy": self.accuracy, "feasible": self.feasible,
                "converged": self.converged, "iterations": self.iterations,
                "log": [{"beta": b, "accuracy": a} for b, a in self.log]}


def calibrate_single_threshold(net: MultiExitNetwork, X, y, target_accuracy: float,
                               step: float = 0.5, max_iters: int = 200, beta0: float = 0.0,
                               tolerance: float = 0.01,
                               table: ExitTable | None = None) -> CalibrationResult:
    """Tune one shared entropy threshold towards ``target_accuracy``.

    Update: ``beta <- clip(beta + step * (accuracy(beta) - target), 0, 1)``.
    Returns the first threshold within ``tolerance`` of the target, else the
    closest one visited.
    """
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty validation set")
    table = table or ExitTable.build(net, X, y)
    m = len(table.exit_ids) - 1
    final_acc = float(table.correct[:, -1].mean())
    if final_acc < target_accuracy:
        acc0 = table.accuracy([0.0] * m)
        return CalibrationResult(0.0, acc0, False, False, 0, [(0.0, acc0)])
    beta = float(np.clip(beta0, 0.0, 1.0))
    log = []
    for it in range(max_iters + 1):
        acc = table.accuracy([beta] * m)
        log.append((beta, acc))
        if abs(acc - target_accuracy) <= tolerance:
            return CalibrationResult(beta, acc, True, True, it, log)
        if it == max_iters:
            break
        beta = float(np.clip(beta + step * (acc - target_accuracy), 0.0, 1.0))
    best_beta, best_acc = min(log, key=lambda r: (abs(r[1] - target_accuracy), -r[0]))
    return CalibrationResult(best_beta, best_acc, True, False, max_iters, log)


# ---------------------------------------------------------------- over-thinking


@dataclass
class OverthinkReport:
    exit_ids: list[int]
    correct_here_wrong_final: dict[int, int]
    wrong_here_correct_final: dict[int, int]
    overthinking_rate: float
    n: int


def overthinking_from_argmax(argmax, y, exit_ids: Sequence[int]) -> OverthinkReport:
    """Count, per early exit, samples it gets right that the final exit gets wrong (and vice versa).

    ``argmax`` has one column per exit id, final exit last.
    """
    am = np.asarray(argmax)
    y = np.asarray(y)
    correct = am == y[:, None]
    final = correct[:, -1]
    early = list(exit_ids)[:-1]
    chwf = {i: int(np.sum(correct[:, k] & ~final)) for k, i in enumerate(early)}
    whcf = {i: int(np.sum(~correct[:, k] & final)) for k, i in enumerate(early)}
    any_early = correct[:, :-1].any(axis=1) if early else np.zeros(len(y), dtype=bool)
    rate = float(np.mean(any_early & ~final)) if len(y) else 0.0
    return OverthinkReport(list(exit_ids), chwf, whcf, rate, len(y))


def overthinking_report(net: MultiExitNetwork, X, y) -> OverthinkReport:
    table = ExitTable.build(net, X, y)
    return overthinking_from_argmax(table.argmax, y, table.exit_ids)
