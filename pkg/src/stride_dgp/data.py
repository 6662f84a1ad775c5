"""Datasets, standardisation, cross-validation splits, metrics and the 1D toy."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_means: Optional[np.ndarray] = None
    feature_stds: Optional[np.ndarray] = None
    target_mean: float = 0.0
    target_std: float = 1.0
    standardized: bool = False

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise DataError(f"X has shape {self.X.shape} but y has {len(self.y)} entries")
        if len(self.y) < 1 or self.X.shape[1] < 1:
            raise DataError("a dataset needs at least one row and one feature")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise DataError("dataset contains non-finite values")

    @property
    def n(self):
        return len(self.y)

    @property
    def d(self):
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return replace(self, X=self.X[idx], y=self.y[idx])

    def standardize(self, features: bool = True, target: bool = True) -> "Dataset":
        """Standardise with this dataset's own column statistics."""
        if self.standardized:
            raise DataError("dataset is already standardised")
        means = self.X.mean(axis=0) if features else np.zeros(self.d)
        stds = self.X.std(axis=0) if features else np.ones(self.d)
        constant = stds == 0
        if np.any(constant):
            warnings.warn(f"constant feature columns {np.flatnonzero(constant).tolist()} "
                          "left unscaled", RuntimeWarning, stacklevel=2)
            stds = np.where(constant, 1.0, stds)
        t_mean = float(self.y.mean()) if target else 0.0
        t_std = float(self.y.std()) if target else 1.0
        if t_std == 0:
            t_std = 1.0
        return Dataset((self.X - means) / stds, (self.y - t_mean) / t_std,
                       means, stds, t_mean, t_std, True)

    def apply_features(self, X) -> np.ndarray:
        """Map raw features into this dataset's standardised coordinates."""
        X = np.asarray(X, dtype=float)
        if self.feature_means is None:
            return X
        return (X - self.feature_means) / self.feature_stds

    def apply_target(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.target_mean) / self.target_std

    def destandardize_target(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float) * self.target_std + self.target_mean

    def destandardize_variance(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) * self.target_std**2

    def standardization(self) -> dict:
        return {
            "feature_means": None if self.feature_means is None else self.feature_means.tolist(),
            "feature_stds": None if self.feature_stds is None else self.feature_stds.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }


def _parse_rows(path, has_header, min_rows):
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        width = None
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and has_header:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
            if not all(math.isfinite(v) for v in values):
                raise DataError(f"{path}:{lineno}: non-finite value")
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(values)}")
            rows.append(values)
    if len(rows) < min_rows:
        raise DataError(f"{path}: no data rows")
    return rows


def load_csv(path, has_header: bool = False) -> Dataset:
    """Read features (all but the last column) and target (last column)."""
    rows = _parse_rows(path, has_header, 1)
    arr = np.asarray(rows, dtype=float)
    if arr.shape[1] < 2:
        raise DataError(f"{path}: need at least one feature column and a target column")
    return Dataset(arr[:, :-1], arr[:, -1])


def load_features(path, d: int, has_header: bool = False) -> np.ndarray:
    """Feature-only CSV with ``d`` columns; zero data rows is allowed."""
    rows = _parse_rows(path, has_header, 0)
    if not rows:
        return np.zeros((0, d))
    arr = np.asarray(rows, dtype=float)
    if arr.shape[1] != d:
        raise DataError(f"{path}: expected {d} feature columns, got {arr.shape[1]}")
    return arr


def kfold_split(n: int, k: int, rng) -> list:
    """Shuffled k-fold partition; fold sizes differ by at most one."""
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = rng.permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train), np.sort(test)))
    return out


def random_split(n: int, test_fraction: float, rng):
    perm = rng.permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def smse(y_test, y_pred) -> float:
    """Mean squared error relative to predicting the test mean."""
    y_test = np.asarray(y_test, dtype=float).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=float).reshape(-1)
    if y_test.shape != y_pred.shape or len(y_test) < 2:
        raise ValueError("smse needs two equal-length vectors with at least two entries")
    denom = np.mean((y_test - y_test.mean()) ** 2)
    if denom == 0:
        raise ValueError("smse is undefined for constant test targets")
    return float(np.mean((y_test - y_pred) ** 2) / denom)


def mnll(y_test, y_pred, gamma2: float) -> float:
    """Gaussian negative log likelihood per test point at noise variance ``gamma2``."""
    y_test = np.asarray(y_test, dtype=float).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=float).reshape(-1)
    if y_test.shape != y_pred.shape or len(y_test) < 1:
        raise ValueError("mnll needs two equal-length, non-empty vectors")
    if not gamma2 > 0:
        raise ValueError("gamma2 must be positive")
    resid = y_test - y_pred
    return float(0.5 * math.log(2 * math.pi * gamma2) + resid @ resid / (2 * len(resid) * gamma2))


TOY_NOISE_STD = 0.02
TOY_SMOOTH_VAR = 1e-4


def _adaptive_simpson(f, a, b, tol, max_depth=50):
    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        if depth <= 0 or abs(left + right - whole) <= 15 * tol:
            return left + right + (left + right - whole) / 15.0
        return (recurse(a, m, fa, flm, fm, left, tol / 2, depth - 1)
                + recurse(m, b, fm, frm, fb, right, tol / 2, depth - 1))

    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


def toy_ground_truth(x: float) -> float:
    """Smoothed sine on [0, 0.6] followed by the steps -1, 1, 0."""
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"toy ground truth is defined on [0, 1], got {x}")
    if x > 0.9:
        return 0.0
    if x > 0.75:
        return 1.0
    if x > 0.6:
        return -1.0
    sd = math.sqrt(TOY_SMOOTH_VAR)
    lo, hi = max(0.1, x - 10 * sd), min(0.4, x + 10 * sd)
    if lo >= hi:
        return 0.0
    norm = 1.0 / math.sqrt(2 * math.pi * TOY_SMOOTH_VAR)

    def integrand(z):
        return norm * math.exp(-((x - z) ** 2) / (2 * TOY_SMOOTH_VAR)) * math.sin(math.pi * (z - 0.25) / 0.15)

    # split at x so the Gaussian peak is always a node
    pieces = [p for p in (lo, min(max(x, lo), hi), hi)]
    return sum(_adaptive_simpson(integrand, a, b, 1e-7) for a, b in zip(pieces, pieces[1:]) if b > a)


def toy_truth_vector(x) -> np.ndarray:
    return np.array([toy_ground_truth(v) for v in np.asarray(x, dtype=float).reshape(-1)])


def toy_dataset(seed: int, n: int = 200, noise_std: float = TOY_NOISE_STD) -> Dataset:
    """Noisy observations of the toy on a uniform grid including both ends."""
    x = np.linspace(0.0, 1.0, n)
    rng = np.random.default_rng(seed)
    return Dataset(x[:, None], toy_truth_vector(x) + noise_std * rng.standard_normal(n))
