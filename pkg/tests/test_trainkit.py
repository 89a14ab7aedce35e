import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from multiexit.data import generate_mixture_dataset, generate_separable_dataset
from multiexit.exitnet import build_network, forward_all_exits
from multiexit.numcore import (ParamGroup, SgdOptimizer, Tensor, backward, cross_entropy,
                               no_grad, param_hash, softmax)
from multiexit.trainkit import (ConfigError, TrainingConfig, TrainingDivergence, combined_output,
                                equispaced_freeze_points, exit_distribution, expanded_output,
                                freezeout_rate, freezeout_schedule, joint_objective,
                                local_delta, recursive_output, setup_feedback, train,
                                train_separate, train_standard)
from multiexit.trainkit.feedback import feedback_step
from multiexit.trainkit.strategies import cost_vector


@pytest.fixture(scope="module")
def small():
    ds = generate_mixture_dataset(400, 0.8, 3, seed=5)
    return ds.X, ds.y


def cfg(**kw):
    base = dict(epochs=2, batch_size=32, lr=0.05, seed=3)
    base.update(kw)
    return TrainingConfig(**base)


# ---------------------------------------------------------------- config


def test_config_rejects_bad_values():
    with pytest.raises(ValidationError):
        TrainingConfig(exit_weights=[0.3, -0.1])
    with pytest.raises(ValidationError):
        TrainingConfig(cost_weights=[1.0, 0.0])
    with pytest.raises(ValidationError):
        TrainingConfig(freeze_points=[5, 3])
    with pytest.raises(ValidationError):
        TrainingConfig(learning_rate=0.1)


def test_alpha_defaults_and_linear_scheme():
    assert TrainingConfig().alphas(3) == [0.3, 0.3, 0.3]
    lin = TrainingConfig(weight_scheme="linear").alphas(3)
    assert lin == pytest.approx([0.1, 0.2, 0.3])
    with pytest.raises(ConfigError):
        TrainingConfig(exit_weights=[1.0]).alphas(2)


# ---------------------------------------------------------------- joint


def test_joint_with_zero_weights_matches_standard(small):
    X, y = small
    a = build_network(2, 8, 4, 3, [1, 2], seed=0)
    b = a.copy()
    train(a, X, y, cfg(strategy="joint", exit_weights=[0.0, 0.0]))
    train_standard(b, X, y, cfg(strategy="standard"))
    assert param_hash(a.backbone_parameters()) == param_hash(b.backbone_parameters())


def test_joint_objective_reduces_to_final_loss(small):
    X, y = small
    net = build_network(2, 8, 4, 3, [1, 2], seed=0)
    with no_grad():
        total, parts = joint_objective(net, X, y, [0.0, 0.0])
    assert abs(total.item() - parts[4].item()) <= 1e-12


def test_joint_gradient_is_sum_of_separate_gradients(small):
    X, y = small
    net = build_network(2, 6, 3, 3, [1], seed=2)
    w = net.stages[0].blocks[0].params["weight"]

    def grad_of(loss):
        for p in net.parameters():
            p.grad = None
        backward(loss)
        return w.grad.copy()

    total, _ = joint_objective(net, X[:20], y[:20], [1.0])
    g_total = grad_of(total)
    g_final = grad_of(cross_entropy(forward_all_exits(net, X[:20]).predictions[3], y[:20]))
    g_head = grad_of(cross_entropy(forward_all_exits(net, X[:20]).predictions[1], y[:20]))
    assert np.allclose(g_total, g_final + g_head, rtol=1e-12, atol=1e-15)


def test_nan_loss_names_first_exit(small):
    X, y = small
    X = X.copy()
    X[0, 0] = np.nan
    net = build_network(2, 4, 3, 3, [1], seed=0)
    with pytest.raises(TrainingDivergence) as info:
        train(net, X, y, cfg(strategy="joint"))
    assert info.value.exit_index == 1


def test_training_is_seed_deterministic(small):
    X, y = small
    hashes = set()
    for _ in range(2):
        net = build_network(2, 8, 3, 3, [1], seed=4)
        train(net, X, y, cfg(strategy="joint"))
        hashes.add(param_hash(net.parameters()))
    assert len(hashes) == 1


def test_history_has_per_exit_curves(small):
    X, y = small
    net = build_network(2, 8, 3, 3, [1], seed=4)
    res = train(net, X, y, cfg(strategy="joint"))
    assert [h["epoch"] for h in res.history] == [1, 2]
    assert set(res.history[0]["loss"]) == {1, 3}
    assert res.history[-1]["wall_time"] >= 0


# ---------------------------------------------------------------- combined output


def test_combined_output_degenerate_and_convex():
    rng = np.random.default_rng(0)
    c1 = Tensor(rng.dirichlet(np.ones(3), 5))
    f = Tensor(rng.dirichlet(np.ones(3), 5))
    assert np.array_equal(combined_output([c1, f], Tensor([0.0, 1.0])).data, f.data)
    assert np.allclose(combined_output([c1, c1], Tensor([0.5, 0.5])).data, c1.data)


def test_softmax_combination_stays_on_simplex(small):
    X, y = small
    net = build_network(2, 8, 3, 3, [1, 2], seed=1)
    res = train(net, X, y, cfg(strategy="combined_output", combine_mode="softmax"))
    traj = res.extras["weight_trajectory"]
    assert traj.shape == (res.iterations, 3)
    assert np.all(traj >= 0)
    assert np.allclose(traj.sum(axis=1), 1.0, atol=1e-12)
    assert not np.allclose(traj[0], traj[-1])


def test_fixed_non_convex_weights_are_rejected(small):
    X, y = small
    net = build_network(2, 4, 3, 3, [1], seed=1)
    with pytest.raises(ConfigError):
        train(net, X, y, cfg(strategy="combined_output", combine_mode="fixed",
                             combine_weights=[0.7, 0.7], require_convex=True))


def test_one_hot_combination_equals_plain_training(small):
    X, y = small
    a = build_network(2, 6, 3, 3, [1], seed=1)
    b = a.copy()
    train(a, X, y, cfg(strategy="combined_output", combine_mode="fixed", combine_weights=[0.0, 1.0]))
    train_standard(b, X, y, cfg(strategy="standard"))
    for pa, pb in zip(a.backbone_parameters(), b.backbone_parameters()):
        assert np.allclose(pa.data, pb.data, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- gated recursion


def test_gates_forced_to_extremes():
    rng = np.random.default_rng(0)
    preds = [rng.dirichlet(np.ones(4), 3) for _ in range(3)]
    ones = [np.ones((3, 1))] * 2
    zeros = [np.zeros((3, 1))] * 2
    assert np.array_equal(recursive_output(preds, ones), preds[0])
    assert np.array_equal(recursive_output(preds, zeros), preds[-1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=0, max_size=6), st.integers(0, 2 ** 31))
def test_recursive_equals_expansion(gates, seed):
    rng = np.random.default_rng(seed)
    preds = [rng.dirichlet(np.ones(3)) for _ in range(len(gates) + 1)]
    rec = recursive_output(preds, gates)
    exp = expanded_output(preds, gates)
    assert np.allclose(rec, exp, atol=1e-9, rtol=0)
    probs, rest = exit_distribution(gates)
    assert abs(sum(probs) + rest - 1.0) <= 1e-9


def test_gated_training_requires_gates(small):
    X, y = small
    net = build_network(2, 4, 3, 3, [1], seed=0)
    with pytest.raises(ConfigError):
        train(net, X, y, cfg(strategy="gated_recursive"))


def test_cost_strength_zero_matches_gated(small):
    X, y = small
    a = build_network(2, 6, 3, 3, [1, 2], seed=0, gates=True)
    b = a.copy()
    train(a, X, y, cfg(strategy="cost_regularized", cost_strength=0.0))
    train(b, X, y, cfg(strategy="gated_recursive"))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.allclose(pa.data, pb.data, rtol=0, atol=1e-12)


def test_cost_vector_from_weights_and_static_costs():
    net = build_network(2, 4, 3, 2, [1], seed=0, gates=True)
    assert cost_vector(net, TrainingConfig(cost_weights=[1.0, 2.0])).tolist() == [1.0, 3.0]
    cum = cost_vector(net, TrainingConfig())
    assert np.all(np.diff(cum) > 0)
    with pytest.raises(ConfigError):
        cost_vector(net, TrainingConfig(cost_weights=[1.0]))


def test_large_cost_strength_moves_mass_to_first_exit():
    ds = generate_separable_dataset(600, seed=0)
    first = []
    for strength in (0.0, 0.5, 2.0, 8.0):
        net = build_network(2, 8, 3, 2, [1, 2], seed=0, gates=True)
        train(net, ds.X, ds.y, TrainingConfig(strategy="cost_regularized", epochs=5, lr=0.1,
                                              cost_strength=strength))
        with no_grad():
            trace = forward_all_exits(net, ds.X)
        probs, _ = exit_distribution([trace.gates[i] for i in net.exits])
        first.append(probs[0].data.mean())
    assert all(b >= a for a, b in zip(first, first[1:])), first
    assert first[-1] > 0.95


# ---------------------------------------------------------------- freezeout


def test_freezeout_rate_values():
    assert freezeout_rate(0, 50, 0.1) == 0.1
    assert freezeout_rate(25, 50, 0.1) == pytest.approx(0.05, abs=1e-15)
    assert freezeout_rate(50, 50, 0.1) == 0.0
    assert freezeout_rate(70, 50, 0.1) == 0.0
    assert equispaced_freeze_points(3, 150) == [50.0, 100.0, 150.0]
    assert freezeout_schedule(2, 99, [50, 100, 150], 0.1) > 0


def test_freezeout_rejects_bad_points(small):
    X, y = small
    net = build_network(2, 4, 3, 3, [1, 2], seed=0)
    with pytest.raises(ConfigError):
        train(net, X, y, cfg(strategy="freezeout", freeze_points=[1, 2]))
    with pytest.raises(ConfigError):
        train(net, X, y, cfg(strategy="freezeout", freeze_points=[1, 2, 10_000]))


# ---------------------------------------------------------------- layer-wise and separate


def test_layerwise_cache_is_forward_of_frozen_stages(small):
    X, y = small
    net = build_network(2, 6, 4, 3, [1, 2, 3], seed=0)
    res = train(net, X, y, cfg(strategy="layerwise"))
    caches = res.extras["caches"]
    h = Tensor(X)
    with no_grad():
        for k in range(1, 4):
            h = net.stages[k - 1](h)
            assert caches[k].tobytes() == h.data.tobytes()
    assert len(res.extras["stage_errors"]) == 4


def test_layerwise_needs_every_exit(small):
    X, y = small
    with pytest.raises(ConfigError):
        train(build_network(2, 4, 3, 3, [1], seed=0), X, y, cfg(strategy="layerwise"))


def test_layerwise_single_stage_is_shallow_classifier(small):
    X, y = small
    a = build_network(2, 4, 1, 3, [], seed=0)
    b = a.copy()
    train(a, X, y, cfg(strategy="layerwise"))
    train_standard(b, X, y, cfg(strategy="standard"))
    assert param_hash(a.parameters()) == param_hash(b.parameters())


def test_layerwise_does_not_degrade_with_identity_capable_stages():
    diffs = []
    for s in range(5):
        ds = generate_mixture_dataset(2000, 0.8, 4, seed=s)
        net = build_network(2, 16, 5, 4, [1, 2, 3, 4], seed=s, init="near_identity")
        res = train(net, ds.X, ds.y, TrainingConfig(strategy="layerwise", epochs=5, lr=0.05,
                                                     seed=s))
        diffs.append(np.diff(res.extras["stage_errors"]))
    assert np.all(np.median(diffs, axis=0) <= 0.01)


def test_separate_heads_match_standalone_oracle(small):
    X, y = small
    net = build_network(2, 6, 3, 3, [1, 2], seed=0)
    c = cfg(strategy="separate")
    frozen = net.copy()
    train_standard(frozen, X, y, c)
    with no_grad():
        emb = {i: forward_all_exits(frozen, X).embeddings[i].data for i in (1, 2)}
    expected = {}
    for i in (1, 2):
        head = net.copy().heads[i]
        opt = SgdOptimizer([ParamGroup(head.parameters(), c.lr)])
        rng = np.random.default_rng(c.seed)
        for _ in range(c.epochs):
            order = rng.permutation(len(y))
            for start in range(0, len(y), c.batch_size):
                idx = order[start:start + c.batch_size]
                opt.zero_grad()
                backward(cross_entropy(head(Tensor(emb[i][idx])), y[idx]))
                opt.step()
        expected[i] = param_hash(head.parameters())
    train_separate(net, X, y, c)
    assert param_hash(net.backbone_parameters()) == param_hash(frozen.backbone_parameters())
    for i in (1, 2):
        assert param_hash(net.heads[i].parameters()) == expected[i]


def test_separate_without_exits_is_standard(small):
    X, y = small
    a = build_network(2, 4, 3, 3, [], seed=0)
    b = a.copy()
    train_separate(a, X, y, cfg(strategy="separate"))
    train_standard(b, X, y, cfg(strategy="standard"))
    assert param_hash(a.parameters()) == param_hash(b.parameters())


# ---------------------------------------------------------------- local feedback


def test_local_delta_with_tied_pair_is_exact_gradient():
    rng = np.random.default_rng(0)
    net = build_network(3, 5, 3, 2, [1, 2], seed=0)
    pairs = setup_feedback(net, seed=1, tied=True)
    h = Tensor(rng.standard_normal((7, 5)), requires_grad=True)
    y = rng.integers(0, 2, 7)
    backward(cross_entropy(softmax(h @ Tensor(pairs[1].forward)), y))
    assert np.allclose(local_delta(h.data, y, pairs[1]), h.grad, rtol=0, atol=1e-12)


def test_feedback_step_touches_no_earlier_stage():
    rng = np.random.default_rng(1)
    net = build_network(3, 5, 3, 2, [1, 2], seed=0)
    pairs = setup_feedback(net, seed=1)
    x, y = rng.standard_normal((6, 3)), rng.integers(0, 2, 6)
    total, _ = feedback_step(net, pairs, x, y)
    backward(total)
    # stage 2's surrogate uses a detached input, so stage 1's gradient is its own term only
    for p in net.parameters():
        p.grad = None
    h1 = net.stages[0](Tensor(x))
    backward((h1 * Tensor(local_delta(h1.data, y, pairs[1]))).sum())
    g_alone = net.stages[0].blocks[0].params["weight"].grad.copy()
    for p in net.parameters():
        p.grad = None
    total, _ = feedback_step(net, pairs, x, y)
    backward(total)
    assert np.array_equal(net.stages[0].blocks[0].params["weight"].grad, g_alone)


def test_feedback_pairs_are_distinct_and_fixed():
    ds = generate_separable_dataset(300, seed=0)
    net = build_network(2, 8, 3, 2, [1, 2], seed=0)
    res = train(net, ds.X, ds.y, TrainingConfig(strategy="local_feedback", epochs=2, seed=0))
    pairs = res.extras["pairs"]
    for i, pair in pairs.items():
        assert not np.array_equal(pair.forward, pair.feedback)
        assert net.heads[i].blocks[0].params["weight"].data.tobytes() == pair.forward.tobytes()
    again = setup_feedback(build_network(2, 8, 3, 2, [1, 2], seed=0), seed=0)
    for i in pairs:
        assert again[i].feedback.tobytes() == pairs[i].feedback.tobytes()


def test_unknown_strategy_is_a_config_error():
    with pytest.raises(ValidationError):
        TrainingConfig(strategy="reinforce")


def test_freeze_schedule_matches_closed_form_pointwise():
    for t in range(0, 200, 7):
        expected = 0.5 * 0.1 * (1 + math.cos(math.pi * t / 60)) if t < 60 else 0.0
        assert abs(freezeout_rate(t, 60, 0.1) - expected) <= 1e-15
