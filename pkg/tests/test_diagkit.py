import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiexit.data import generate_mixture_dataset
from multiexit.diagkit import (convergence_compare, estimate_mutual_information, ib_plane,
                               iterations_to_target, median_iterations, write_convergence,
                               write_ib_points)
from multiexit.exitnet import build_network
from multiexit.io import read_csv
from multiexit.trainkit import TrainingConfig, train

MI = estimate_mutual_information


# ---------------------------------------------------------------- estimator


def test_independent_inputs_are_near_zero():
    rng = np.random.default_rng(0)
    assert MI(rng.uniform(size=10_000), rng.uniform(size=10_000), 16) < 0.05


def test_identity_channel_is_two_bits():
    a = np.random.default_rng(1).integers(0, 4, 10_000)
    assert MI(a, a, 16) == pytest.approx(2.0, rel=0.05)


def test_sign_of_symmetric_input_is_one_bit():
    rng = np.random.default_rng(2)
    z = rng.standard_normal(5_000)
    x = np.concatenate([z, -z])
    assert MI(x, np.sign(x), 16) == pytest.approx(1.0, rel=0.05)
    u = rng.uniform(-1, 1, 10_000)
    assert MI(u, np.sign(u), 16) == pytest.approx(1.0, rel=0.05)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 20), st.integers(1, 5), st.integers(1, 5))
def test_symmetric_and_nonnegative(seed, bins, da, db):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((300, da))
    b = a[:, :1] * rng.uniform(-1, 1) + rng.standard_normal((300, db))
    ab, ba = MI(a, b, bins), MI(b, a, bins)
    assert ab >= 0 and abs(ab - ba) <= 1e-9


def test_constant_input_gives_zero_and_bad_args_raise():
    x = np.random.default_rng(0).standard_normal(100)
    assert MI(np.ones(100), x) == 0.0
    assert MI(np.zeros((100, 4)), x) == 0.0
    with pytest.raises(ValueError):
        MI(x, x, bins=1)
    with pytest.raises(ValueError):
        MI(x, x[:50])


def test_data_processing_on_a_chain():
    for s in range(3):
        rng = np.random.default_rng(s)
        x = rng.standard_normal((10_000, 3))
        f = x[:, :2] + 0.3 * rng.standard_normal((10_000, 2))
        y = (f[:, 0] > 0).astype(int)
        assert MI(x, y) <= MI(x, f) + 0.1


# ---------------------------------------------------------------- information plane


def test_constant_embeddings_sit_at_the_origin():
    rng = np.random.default_rng(0)
    net = build_network(2, 8, 4, 3, [1, 2], seed=0, init="zeros")
    points = ib_plane(net, rng.standard_normal((500, 2)), rng.integers(0, 3, 500))
    assert [(p.i_x, p.i_y) for p in points] == [(0.0, 0.0)] * 3


def test_trained_final_exit_approaches_label_entropy(tmp_path):
    ds = generate_mixture_dataset(3000, 0.8, 4, seed=0).split(0)
    net = build_network(2, 32, 6, 4, [1, 3], seed=0)
    train(net, *ds.train, TrainingConfig(strategy="joint", epochs=10, lr=0.05))
    X, y = ds.test
    points = ib_plane(net, X, y)
    h_y = MI(y, y)
    final = points[-1]
    assert final.exit_index == 6
    assert final.i_y >= 0.9 * h_y
    assert all(p.i_y <= math.log2(4) + 0.05 for p in points)
    assert ib_plane(net, X, y) == points
    rows = read_csv(write_ib_points(points, tmp_path / "ib.csv"))
    assert [int(r["exit"]) for r in rows] == [1, 3, 6]
    assert float(rows[0]["I_Y"]) == points[0].i_y


# ---------------------------------------------------------------- convergence


def test_sentinel_when_target_missed():
    assert iterations_to_target([1.0, 0.5, 0.2], 0.5) == 2
    assert iterations_to_target([1.0, 0.9], 0.1) == 3


@pytest.fixture(scope="module")
def tiny_task():
    ds = generate_mixture_dataset(400, 0.8, 3, seed=0)
    return ds.X, ds.y


def make(seed):
    return build_network(2, 8, 4, 3, [1, 2, 3], seed=seed)


def test_zero_alpha_joint_matches_standard(tiny_task):
    X, y = tiny_task
    configs = {"standard": TrainingConfig(strategy="standard", epochs=2),
               "joint0": TrainingConfig(strategy="joint", epochs=2, base_exit_weight=0.0)}
    recs = convergence_compare(make, X, y, configs, 0.8, [0, 1])
    by = {(r.strategy, r.seed): r for r in recs}
    for s in (0, 1):
        assert by["standard", s].losses == by["joint0", s].losses
        assert by["standard", s].init_hash == by["joint0", s].init_hash
        assert by["standard", s].iterations_to_target == by["joint0", s].iterations_to_target
    assert median_iterations(recs, "standard") == median_iterations(recs, "joint0")


def test_records_are_deterministic_and_complete(tiny_task, tmp_path):
    X, y = tiny_task
    configs = {"joint": TrainingConfig(strategy="joint", epochs=2, batch_size=50)}
    a = convergence_compare(make, X, y, configs, 0.0, [3])
    b = convergence_compare(make, X, y, configs, 0.0, [3])
    assert a == b
    assert len(a[0].losses) == 2 * 8
    assert a[0].iterations_to_target == 17 and not a[0].reached
    rows = read_csv(write_convergence(a, tmp_path / "conv.csv"))
    assert len(rows) == 16 and rows[0]["strategy"] == "joint"
