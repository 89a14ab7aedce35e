"""Synthetic easy/hard mixtures and CSV ingestion."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import SCHEMA_LINE


class DataError(ValueError):
    pass


@dataclass
class SyntheticDataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)
    splits: dict[str, np.ndarray] | None = None
    easy: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if self.splits is None:
            raise DataError("dataset has not been split")
        idx = self.splits[name]
        return self.X[idx], self.y[idx]

    @property
    def train(self):
        return self.subset("train")

    @property
    def validation(self):
        return self.subset("validation")

    @property
    def test(self):
        return self.subset("test")

    def split(self, seed: int = 0, fractions=(0.70, 0.15, 0.15)) -> "SyntheticDataset":
        n = len(self)
        order = np.random.default_rng(seed).permutation(n)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        splits = {"train": order[:n_train],
                  "validation": order[n_train:n_train + n_val],
                  "test": order[n_train + n_val:]}
        return SyntheticDataset(self.X, self.y, self.num_classes, dict(self.meta), splits,
                                self.easy)


def generate_mixture_dataset(n: int, easy_fraction: float, num_classes: int, seed: int = 0,
                             dim: int = 2, easy_radius: float = 6.0, easy_spread: float = 0.5,
                             ring_gap: float = 0.6, ring_noise: float = 0.08) -> SyntheticDataset:
    """Easy samples: one tight Gaussian per class on a wide circle (linearly
    separable).  Hard samples: concentric rings near the origin, class = ring,
    which no linear map can separate.  Extra ``dim > 2`` features are small noise.

    Labels cycle through the classes, so counts differ by at most one.
    """
    if not 0.0 <= easy_fraction <= 1.0:
        raise DataError(f"easy_fraction {easy_fraction} outside [0, 1]")
    if num_classes < 2:
        raise DataError("need at least two classes")
    if n < num_classes:
        raise DataError(f"n={n} smaller than the class count {num_classes}")
    if dim < 2:
        raise DataError("dim must be at least 2")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    n_easy = int(round(easy_fraction * n))
    easy = np.zeros(n, dtype=bool)
    easy[rng.permutation(n)[:n_easy]] = True

    X = np.zeros((n, dim))
    centre_angle = 2 * np.pi * np.arange(num_classes) / num_classes
    centres = easy_radius * np.stack([np.cos(centre_angle), np.sin(centre_angle)], axis=1)
    X[easy, :2] = centres[y[easy]] + easy_spread * rng.standard_normal((n_easy, 2))

    hard = ~easy
    n_hard = int(hard.sum())
    theta = rng.uniform(0, 2 * np.pi, n_hard)
    radius = ring_gap * (y[hard] + 1) + ring_noise * rng.standard_normal(n_hard)
    X[hard, 0] = radius * np.cos(theta)
    X[hard, 1] = radius * np.sin(theta)
    if dim > 2:
        X[:, 2:] = 0.1 * rng.standard_normal((n, dim - 2))

    meta = {"generator": "mixture", "n": n, "easy_fraction": easy_fraction,
            "num_classes": num_classes, "seed": seed, "dim": dim,
            "easy_radius": easy_radius, "easy_spread": easy_spread,
            "ring_gap": ring_gap, "ring_noise": ring_noise}
    return SyntheticDataset(X, y.astype(np.int64), num_classes, meta, easy=easy)


def generate_separable_dataset(n: int, seed: int = 0, dim: int = 2,
                               margin: float = 0.5) -> SyntheticDataset:
    """Two classes split by a random hyperplane with a guaranteed margin."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(dim)
    w /= np.linalg.norm(w)
    X = rng.uniform(-2, 2, (4 * n, dim))
    score = X @ w
    keep = np.abs(score) >= margin
    X, score = X[keep][:n], score[keep][:n]
    if len(X) < n:
        raise DataError("margin too large for the requested sample count")
    y = (score > 0).astype(np.int64)
    return SyntheticDataset(X, y, 2, {"generator": "separable", "n": n, "seed": seed,
                                      "dim": dim, "margin": margin})


def write_dataset_csv(ds: SyntheticDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(SCHEMA_LINE + "\n")
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(ds.X.shape[1])] + ["label"])
        for row, label in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_tabular_dataset(path, seed: int = 0, num_classes: int | None = None) -> SyntheticDataset:
    """Parse a header + rows CSV whose last column is an integer label, then split 70/15/15.

    Lines starting with ``#`` are comments.  Errors name the physical line.
    """
    path = Path(path)
    header = None
    rows, labels = [], []
    with path.open(newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = next(csv.reader([stripped]))
            if header is None:
                header = fields
                if len(header) < 2:
                    raise DataError(f"line {lineno}: need at least one feature and a label")
                continue
            if len(fields) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(fields)}")
            try:
                feats = [float(v) for v in fields[:-1]]
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric feature") from None
            if not all(np.isfinite(feats)):
                raise DataError(f"line {lineno}: non-finite feature")
            try:
                label = int(fields[-1])
            except ValueError:
                raise DataError(f"line {lineno}: label {fields[-1]!r} is not an integer") from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise DataError(f"line {lineno}: label {label} out of range")
            rows.append(feats)
            labels.append(label)
    if header is None or not rows:
        raise DataError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    C = num_classes if num_classes is not None else int(y.max()) + 1
    ds = SyntheticDataset(np.asarray(rows, dtype=np.float64), y, max(C, 2),
                          {"generator": "csv", "path": str(path), "seed": seed})
    return ds.split(seed)
