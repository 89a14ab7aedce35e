import time

import numpy as np
import pytest

from multiexit.data import generate_mixture_dataset
from multiexit.exitnet import build_network
from multiexit.numcore import backward
from multiexit.trainkit import TrainingConfig, train

ACCEPTANCE_LINES: list[str] = []
TIMINGS: dict[str, float] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (modified in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + eps
        up = f()
        arr[idx] = old - eps
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradient_errors(loss_fn, params) -> list[float]:
    """Relative error between backprop and finite differences, one entry per tensor."""
    for p in params:
        p.grad = None
    backward(loss_fn())
    errs = []
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(lambda: loss_fn().item(), p.data)
        errs.append(rel_error(analytic, numeric))
    return errs


@pytest.fixture(scope="session")
def mixture():
    return generate_mixture_dataset(10000, 0.8, 4, seed=0).split(0)


@pytest.fixture(scope="session")
def trained_mixture_net(mixture):
    """The desk-scale reference setup: 6 stages, exits after stages 1 and 3, joint training."""
    X, y = mixture.train
    start = time.perf_counter()
    net = build_network(2, 32, 6, 4, [1, 3], seed=0)
    train(net, X, y, TrainingConfig(strategy="joint", epochs=20, lr=0.05, seed=0))
    TIMINGS["trained_mixture_net"] = time.perf_counter() - start
    return net
