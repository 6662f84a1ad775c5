"""Stationary covariance kernels and kernel-matrix assembly.

Every covariance used in the package is either a stationary kernel evaluated
on some coordinates (raw inputs, warped inputs, or hidden-layer outputs) or
the convolution kernel with a spatially varying length scale.  Both are
expressed through :class:`LayerInputs`, so the sparse and deep-GP code only
ever deals with an :class:`IndexKernel` over data rows.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

SQRT3 = np.sqrt(3.0)


class KernelKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    MATERN32 = "matern32"


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel ``sigma2 * rho(|x - x'| / lengthscale)``."""

    kind: KernelKind
    sigma2: float
    lengthscale: float

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if not (self.sigma2 > 0 and np.isfinite(self.sigma2)):
            raise ValueError(f"sigma2 must be positive and finite, got {self.sigma2}")
        if not (self.lengthscale > 0 and np.isfinite(self.lengthscale)):
            raise ValueError(f"lengthscale must be positive and finite, got {self.lengthscale}")

    def replace(self, **changes) -> "KernelSpec":
        fields = {"kind": self.kind, "sigma2": self.sigma2, "lengthscale": self.lengthscale}
        fields.update(changes)
        return KernelSpec(**fields)

    def __call__(self, x, xp) -> float:
        return eval_kernel(self, x, xp)


def correlation(kind: KernelKind, r):
    """Isotropic correlation function evaluated at scaled distance ``r >= 0``."""
    r = np.asarray(r, dtype=float)
    if kind is KernelKind.GAUSSIAN:
        return np.exp(-0.5 * r * r)
    if kind is KernelKind.MATERN32:
        s = SQRT3 * r
        return (1.0 + s) * np.exp(-s)
    raise ValueError(f"unknown kernel kind {kind!r}")


def as_points(X) -> np.ndarray:
    """Return ``X`` as a float array of shape (n, d); 1-D input is one column."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X[:, None]
    elif X.ndim != 2:
        raise ValueError(f"expected a point list of shape (n, d), got shape {X.shape}")
    return X


def distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between the rows of ``A`` and ``B``."""
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if A.shape[1] == 1:
        return np.abs(A[:, 0][:, None] - B[:, 0][None, :])
    sq = (
        np.einsum("ij,ij->i", A, A)[:, None]
        + np.einsum("ij,ij->i", B, B)[None, :]
        - 2.0 * (A @ B.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return np.sqrt(sq)


def eval_kernel(spec: KernelSpec, x, xp) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    if x.shape != xp.shape or x.ndim != 1:
        raise ValueError(f"points must share one dimension, got {x.shape} and {xp.shape}")
    r = np.linalg.norm(x - xp) / spec.lengthscale
    return float(spec.sigma2 * correlation(spec.kind, r))


def kernel_matrix(kernel, X, Xp) -> np.ndarray:
    """Matrix ``[kernel(X_i, Xp_j)]``.

    ``kernel`` is either a :class:`KernelSpec` (vectorised path) or any
    callable of two points (evaluated pairwise).
    """
    X, Xp = as_points(X), as_points(Xp)
    if len(X) and len(Xp) and X.shape[1] != Xp.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Xp.shape[1]}")
    if isinstance(kernel, KernelSpec):
        if len(X) == 0 or len(Xp) == 0:
            return np.zeros((len(X), len(Xp)))
        return kernel.sigma2 * correlation(kernel.kind, distances(X, Xp) / kernel.lengthscale)
    out = np.empty((len(X), len(Xp)))
    for i, x in enumerate(X):
        for j, xp in enumerate(Xp):
            out[i, j] = kernel(x, xp)
    return out


class ConvForm(str, enum.Enum):
    """How local length scales combine in the convolution kernel.

    ``ARITHMETIC`` uses the prefactor ``(2 sqrt(h h') / (h + h'))^(d/2)`` with the
    distance scaled by ``2 / (h + h')``.  It is not positive semi-definite for
    every field.  ``PACIOREK`` treats ``h`` as a length (covariance ``h^2 I``)
    and uses ``(2 h h' / (h^2 + h'^2))^(d/2)`` with the distance scaled by
    ``sqrt(2 / (h^2 + h'^2))``, which is positive semi-definite by
    construction.  Both reduce to the stationary kernel when ``h == h'``.
    """

    ARITHMETIC = "arithmetic"
    PACIOREK = "paciorek"


def conv_covariance(spec: KernelSpec, Xa, ha, Xb, hb, form=ConvForm.ARITHMETIC) -> np.ndarray:
    """Convolution kernel with per-point length scales ``ha``, ``hb``.

    ``spec.lengthscale`` is ignored; the local length scales replace it.
    """
    Xa, Xb = as_points(Xa), as_points(Xb)
    ha = np.asarray(ha, dtype=float).reshape(-1)
    hb = np.asarray(hb, dtype=float).reshape(-1)
    d = Xa.shape[1]
    if len(Xa) == 0 or len(Xb) == 0:
        return np.zeros((len(Xa), len(Xb)))
    if ConvForm(form) is ConvForm.ARITHMETIC:
        hsum = ha[:, None] + hb[None, :]
        prefactor = (2.0 * np.sqrt(ha[:, None] * hb[None, :]) / hsum) ** (d / 2.0)
        r = 2.0 * distances(Xa, Xb) / hsum
    else:
        sq = ha[:, None] ** 2 + hb[None, :] ** 2
        prefactor = (2.0 * ha[:, None] * hb[None, :] / sq) ** (d / 2.0)
        r = distances(Xa, Xb) * np.sqrt(2.0 / sq)
    return spec.sigma2 * prefactor * correlation(spec.kind, r)


@dataclass(frozen=True)
class LayerInputs:
    """What a layer kernel sees at a set of locations.

    ``coords`` are the points the kernel measures distance between.  When
    ``field`` is given, the convolution kernel is used with ``field`` as the
    local length scale; otherwise the stationary kernel is used.
    """

    coords: np.ndarray
    field: Optional[np.ndarray] = None
    form: ConvForm = ConvForm.ARITHMETIC

    def __len__(self):
        return len(self.coords)

    def take(self, idx) -> "LayerInputs":
        idx = np.asarray(idx, dtype=int)
        return LayerInputs(
            self.coords[idx], None if self.field is None else self.field[idx], self.form
        )


def layer_covariance(spec: KernelSpec, a: LayerInputs, b: LayerInputs) -> np.ndarray:
    if (a.field is None) != (b.field is None):
        raise ValueError("cannot mix stationary and convolution layer inputs")
    if a.field is None:
        return kernel_matrix(spec, a.coords, b.coords)
    return conv_covariance(spec, a.coords, a.field, b.coords, b.field, a.form)


class IndexKernel:
    """Covariance over the rows of a fixed set of locations.

    Only blocks that are explicitly requested are materialised, so callers
    keep memory at O(n m) by requesting m rows at a time.
    """

    def __init__(self, spec: KernelSpec, inputs: LayerInputs):
        self.spec = spec
        self.inputs = inputs
        self.n = len(inputs)

    @classmethod
    def stationary(cls, spec: KernelSpec, X) -> "IndexKernel":
        return cls(spec, LayerInputs(as_points(X)))

    def block(self, rows: Sequence[int], cols: Optional[Sequence[int]] = None) -> np.ndarray:
        a = self.inputs.take(rows)
        b = self.inputs if cols is None else self.inputs.take(cols)
        return layer_covariance(self.spec, a, b)

    def diag(self) -> np.ndarray:
        # Both the stationary and the convolution kernel equal sigma2 on the diagonal.
        return np.full(self.n, self.spec.sigma2)

    def cross(self, rows: Sequence[int], other: LayerInputs) -> np.ndarray:
        return layer_covariance(self.spec, self.inputs.take(rows), other)


def as_index_kernel(kernel, X=None) -> IndexKernel:
    if isinstance(kernel, IndexKernel):
        return kernel
    if isinstance(kernel, KernelSpec):
        if X is None:
            raise ValueError("a KernelSpec needs the observation locations X")
        return IndexKernel.stationary(kernel, X)
    raise TypeError(f"cannot build an index kernel from {type(kernel).__name__}")


CovarianceFunction = Callable[[np.ndarray, np.ndarray], float]
