"""Training strategies for multi-exit networks.

All strategies share one minibatch loop: the permutation of each epoch comes
from ``default_rng(cfg.seed)``, so two strategies run with the same seed see
the same batches in the same order.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..costs import full_cost, incremental_exit_costs
from ..exitnet import MultiExitNetwork, forward_all_exits
from ..numcore import (ParamGroup, SgdOptimizer, Tensor, backward, cross_entropy, no_grad,
                       softmax)
from .config import ConfigError, TrainingConfig
from .feedback import feedback_step, setup_feedback
from .objectives import (combined_objective, cost_objective, cumulative_costs,
                         gated_objective, joint_objective)
from .schedules import equispaced_freeze_points, freezeout_schedule

StepHook = Callable[[int, MultiExitNetwork], None]


class TrainingDivergence(FloatingPointError):
    def __init__(self, message: str, exit_index: int | None = None, stage: int | None = None):
        super().__init__(message)
        self.exit_index = exit_index
        self.stage = stage


@dataclass
class TrainResult:
    net: MultiExitNetwork
    history: list[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    iterations: int = 0


def exit_metrics(net: MultiExitNetwork, X, y) -> dict[int, tuple[float, float]]:
    """Per-exit (mean cross-entropy, accuracy) over a whole dataset."""
    with no_grad():
        trace = forward_all_exits(net, X)
    out = {}
    for i in net.exit_ids:
        p = trace.predictions[i]
        out[i] = (cross_entropy(p, y).item(), float(np.mean(p.data.argmax(axis=1) == y)))
    return out


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _check_finite(total: Tensor, parts: dict, stage: int | None = None) -> None:
    if np.isfinite(total.data).all():
        return
    bad = [i for i in sorted(parts) if not np.isfinite(parts[i].data).all()]
    where = bad[0] if bad else None
    label = f"stage {stage}" if stage is not None else f"exit {where}"
    raise TrainingDivergence(f"non-finite loss at {label}", exit_index=where, stage=stage)


def _fit(n: int, cfg: TrainingConfig, objective, groups: list[ParamGroup],
         on_step: StepHook | None = None, net: MultiExitNetwork | None = None,
         metrics: Callable[[], dict] | None = None,
         stage: int | None = None) -> tuple[list[dict], int]:
    """Minibatch SGD; ``objective(idx)`` maps sample indices to ``(total, parts)``."""
    rng = np.random.default_rng(cfg.seed)
    opt = SgdOptimizer(groups)
    history = []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        for idx in batches(n, cfg.batch_size, rng):
            opt.zero_grad()
            total, parts = objective(idx)
            _check_finite(total, parts, stage)
            backward(total)
            for group in groups:
                for p in group.params:
                    if p.grad is None:
                        # unreachable from this loss: zero gradient by contract
                        p.grad = np.zeros_like(p.data)
            opt.step()
            if on_step is not None:
                on_step(opt.t, net)
        record = {"epoch": epoch}
        if metrics is not None:
            record.update(metrics())
        record["wall_time"] = time.perf_counter() - start
        history.append(record)
    return history, opt.t


def _net_metrics(net, X, y):
    def compute():
        m = exit_metrics(net, X, y)
        return {"loss": {i: v[0] for i, v in m.items()},
                "accuracy": {i: v[1] for i, v in m.items()}}
    return compute


def _fit_net(net, X, y, cfg, objective, groups, on_step=None):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    return _fit(len(y), cfg, lambda idx: objective(X[idx], y[idx]), groups, on_step, net,
                _net_metrics(net, X, y))


def _rate_groups(net: MultiExitNetwork, cfg: TrainingConfig, heads=True, gates=False,
                 backbone=True) -> list[ParamGroup]:
    groups = []
    for i, s in enumerate(net.stages, 1):
        ps = s.parameters() if backbone else []
        if heads and i in net.heads:
            ps = ps + net.heads[i].parameters()
        if gates and i in net.gates:
            ps = ps + net.gates[i].parameters()
        if ps:
            groups.append(ParamGroup(ps, cfg.stage_rate(i), f"stage{i}"))
    return groups


# ------------------------------------------------------------------ strategies


def train_standard(net, X, y, cfg: TrainingConfig, on_step: StepHook | None = None) -> TrainResult:
    """Backbone only, final loss only."""
    L = net.depth

    def objective(xb, yb):
        trace = forward_all_exits(net, xb)
        loss = cross_entropy(trace.predictions[L], yb)
        return loss, {L: loss}

    groups = _rate_groups(net, cfg, heads=False)
    history, t = _fit_net(net, X, y, cfg, objective, groups, on_step)
    return TrainResult(net, history, {}, t)


def train_joint(net, X, y, cfg: TrainingConfig, on_step: StepHook | None = None) -> TrainResult:
    """Deep supervision: minimise ``L + sum_i alpha_i L_i`` in one backward pass per batch."""
    alphas = cfg.alphas(len(net.exits))
    groups = _rate_groups(net, cfg)
    history, t = _fit_net(net, X, y, cfg, lambda xb, yb: joint_objective(net, xb, yb, alphas),
                          groups, on_step)
    return TrainResult(net, history, {"alphas": alphas}, t)


def _initial_combination(cfg: TrainingConfig, m: int) -> np.ndarray:
    if cfg.combine_weights is not None:
        w = np.asarray(cfg.combine_weights, dtype=np.float64)
        if w.shape != (m,):
            raise ConfigError(f"{w.size} combination weights for {m} outputs")
        if cfg.combine_mode == "softmax":
            if np.any(w <= 0):
                raise ConfigError("softmax-mode initial weights must be positive")
            return np.log(w)
        if cfg.combine_mode == "fixed" and cfg.require_convex:
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError(f"fixed weights {w.tolist()} are not a convex combination")
        return w
    if cfg.combine_mode == "softmax":
        return np.zeros(m)
    return np.full(m, 1.0 / m)


def train_combined_output(net, X, y, cfg: TrainingConfig,
                          on_step: StepHook | None = None) -> TrainResult:
    """Single loss on ``alpha f(x) + sum_i alpha_i c_i(x)``.

    Modes: ``fixed`` (weights frozen), ``trainable`` (raw weights learnt),
    ``softmax`` (weights = softmax of learnt logits, always convex).
    """
    m = len(net.exit_ids)
    raw = Tensor(_initial_combination(cfg, m), requires_grad=cfg.combine_mode != "fixed",
                 name="combination")
    groups = _rate_groups(net, cfg)
    if cfg.combine_mode != "fixed":
        groups.append(ParamGroup([raw], cfg.lr, "combination"))
    trajectory = []

    def record(t, _net):
        w = softmax(Tensor(raw.data)).data if cfg.combine_mode == "softmax" else raw.data
        trajectory.append(w.copy())
        if on_step is not None:
            on_step(t, _net)

    history, t = _fit_net(net, X, y, cfg,
                          lambda xb, yb: combined_objective(net, xb, yb, raw, cfg.combine_mode),
                          groups, record)
    final = trajectory[-1] if trajectory else raw.data.copy()
    return TrainResult(net, history, {"combination_raw": raw.data.copy(),
                                      "combination_weights": final,
                                      "weight_trajectory": np.asarray(trajectory)}, t)


def _require_gates(net: MultiExitNetwork) -> None:
    missing = [i for i in net.exits if i not in net.gates]
    if missing:
        raise ConfigError(f"exits {missing} have no gate")


def train_gated_recursive(net, X, y, cfg: TrainingConfig,
                          on_step: StepHook | None = None) -> TrainResult:
    """Cross-entropy on the recursively gated output; soft gates throughout."""
    _require_gates(net)
    groups = _rate_groups(net, cfg, gates=True)
    history, t = _fit_net(net, X, y, cfg, lambda xb, yb: gated_objective(net, xb, yb), groups,
                          on_step)
    return TrainResult(net, history, {}, t)


def cost_vector(net: MultiExitNetwork, cfg: TrainingConfig) -> np.ndarray:
    """Cumulative cost of stopping at each exit (early exits, then final).

    User-supplied ``cost_weights`` are incremental and used as given; the
    default static MAC costs are divided by the plain backbone cost.
    """
    if cfg.cost_weights is not None:
        if len(cfg.cost_weights) != len(net.exit_ids):
            raise ConfigError(f"{len(cfg.cost_weights)} cost weights for "
                              f"{len(net.exit_ids)} exits")
        return cumulative_costs(cfg.cost_weights)
    eps = incremental_exit_costs(net, with_gates=True)
    if np.any(eps <= 0):
        raise ConfigError("static exit costs must be positive")
    return cumulative_costs(eps) / full_cost(net)


def train_cost_regularized(net, X, y, cfg: TrainingConfig,
                           on_step: StepHook | None = None) -> TrainResult:
    """Gated objective plus ``strength`` times the differentiable expected exit cost."""
    _require_gates(net)
    cum = cost_vector(net, cfg)
    groups = _rate_groups(net, cfg, gates=True)
    history, t = _fit_net(net, X, y, cfg,
                          lambda xb, yb: cost_objective(net, xb, yb, cum, cfg.cost_strength),
                          groups, on_step)
    return TrainResult(net, history, {"cumulative_costs": cum}, t)


def train_freezeout(net, X, y, cfg: TrainingConfig,
                    on_step: StepHook | None = None) -> TrainResult:
    """Joint objective; stage ``i`` (with its head) is annealed to a hard stop at ``t_i``."""
    alphas = cfg.alphas(len(net.exits))
    T = cfg.epochs * num_batches(len(y), cfg.batch_size)
    L = net.depth
    points = cfg.freeze_points or equispaced_freeze_points(L, T)
    if len(points) != L:
        raise ConfigError(f"{len(points)} freeze points for {L} stages")
    if points[-1] > T:
        raise ConfigError(f"last freeze point {points[-1]} beyond T={T}")
    groups = []
    for i, ps in enumerate(net.stage_parameter_groups(), 1):
        eta0 = cfg.stage_rate(i)
        groups.append(ParamGroup(ps, lambda t, i=i, eta0=eta0: freezeout_schedule(i, t, points, eta0),
                                 f"stage{i}"))
    history, t = _fit_net(net, X, y, cfg, lambda xb, yb: joint_objective(net, xb, yb, alphas),
                          groups, on_step)
    return TrainResult(net, history, {"freeze_points": list(points), "alphas": alphas}, t)


def _train_block(params, forward, X, y, cfg: TrainingConfig, stage: int):
    def objective(idx):
        loss = cross_entropy(forward(Tensor(X[idx])), y[idx])
        return loss, {stage: loss}

    groups = [ParamGroup(params, cfg.stage_rate(stage), f"stage{stage}")]
    return _fit(len(y), cfg, objective, groups, stage=stage)


def train_layerwise(net, X, y, cfg: TrainingConfig) -> TrainResult:
    """Greedy stage-by-stage training with an embedding cache.

    Stage ``k`` trains ``(f_k, c_k)`` on its own loss from cached inputs, is
    frozen, and its outputs replace the cache for stage ``k + 1``.
    """
    L = net.depth
    needed = list(range(1, L))
    if net.exits != needed:
        raise ConfigError(f"layer-wise training needs an exit after every stage, have {net.exits}")
    cache = np.asarray(X, dtype=np.float64)
    history, stage_errors, caches = [], [], [cache]
    total_t = 0
    for k in range(1, L + 1):
        stage = net.stages[k - 1]
        if k < L:
            head = net.heads[k]
            params = stage.parameters() + head.parameters()
            fwd = lambda t, stage=stage, head=head: head(stage(t))
        else:
            params = stage.parameters()
            fwd = stage
        try:
            h, t = _train_block(params, fwd, cache, y, cfg, k)
        except TrainingDivergence as exc:
            raise TrainingDivergence(f"layer-wise stage {k} diverged", stage=k) from exc
        total_t += t
        with no_grad():
            out = fwd(Tensor(cache)).data
            err = float(np.mean(out.argmax(axis=1) != y))
            cache = stage(Tensor(cache)).data
        stage_errors.append(err)
        caches.append(cache)
        history.append({"stage": k, "train_error": err})
    return TrainResult(net, history, {"stage_errors": stage_errors, "caches": caches}, total_t)


def train_separate(net, X, y, cfg: TrainingConfig) -> TrainResult:
    """Backbone on the final loss first; then heads on frozen cached embeddings."""
    phase1 = train_standard(net, X, y, cfg)
    extras = {}
    if net.exits:
        with no_grad():
            trace = forward_all_exits(net, X)
        cached = {i: trace.embeddings[i].data for i in net.exits}
        extras["caches"] = cached
        heads = [net.heads[i] for i in net.exits]

        def objective(idx):
            yb = y[idx]
            parts = {i: cross_entropy(net.heads[i](Tensor(cached[i][idx])), yb)
                     for i in net.exits}
            total = parts[net.exits[0]]
            for i in net.exits[1:]:
                total = total + parts[i]
            return total, parts

        groups = [ParamGroup(h.parameters(), cfg.stage_rate(h.attach), f"head{h.attach}")
                  for h in heads]
        _, t2 = _fit(len(y), cfg, objective, groups)
        extras["phase2_iterations"] = t2
    history = phase1.history + [{"phase": 2, **{f"exit{i}": v for i, v in
                                                exit_metrics(net, X, y).items()}}]
    return TrainResult(net, history, extras, phase1.iterations)


def train_local_feedback(net, X, y, cfg: TrainingConfig,
                         on_step: StepHook | None = None) -> TrainResult:
    """Stage-local learning through fixed random heads ``M`` and feedback ``K``."""
    L = net.depth
    if net.exits != list(range(1, L)):
        raise ConfigError("local feedback training needs an exit after every stage")
    pairs = setup_feedback(net, cfg.seed, tied=cfg.feedback_tied)
    groups = [ParamGroup(s.parameters(), cfg.stage_rate(i), f"stage{i}")
              for i, s in enumerate(net.stages, 1)]
    history, t = _fit_net(net, X, y, cfg, lambda xb, yb: feedback_step(net, pairs, xb, yb),
                          groups, on_step)
    return TrainResult(net, history, {"pairs": pairs}, t)


STRATEGIES = {
    "standard": train_standard,
    "joint": train_joint,
    "combined_output": train_combined_output,
    "gated_recursive": train_gated_recursive,
    "layerwise": train_layerwise,
    "separate": train_separate,
    "freezeout": train_freezeout,
    "cost_regularized": train_cost_regularized,
    "local_feedback": train_local_feedback,
}


def train(net: MultiExitNetwork, X, y, cfg: TrainingConfig) -> TrainResult:
    return STRATEGIES[cfg.strategy](net, X, y, cfg)
