"""Deep GP priors: convolution, composition and injective-warp architectures.

Layers are numbered by *level*: levels 0..L-1 are hidden layers and level L
is the top (output) layer, which is marginalised analytically.  The kernel of
level ``c >= 1`` depends on the realised values of level ``c - 1``; level 0 is
stationary on the raw inputs.  :meth:`DeepGPConfig.level_inputs` turns lower
layer values into the :class:`~stride_dgp.kernels.LayerInputs` a level's
kernel is evaluated on.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .kernels import (
    IndexKernel,
    KernelKind,
    ConvForm,
    KernelSpec,
    LayerInputs,
    as_points,
    correlation,
    eval_kernel,
)


class Arch(str, enum.Enum):
    CONVOLUTION = "convolution"
    COMPOSITION = "composition"
    INJECTIVE1D = "injective1d"


def h_transform(z, u_min: float, u_max: Optional[float] = None):
    """Clamp-then-square map from hidden values to local length scales."""
    if not u_min > 0 or (u_max is not None and not u_max > u_min):
        raise ValueError(f"need 0 < u_min < u_max, got {u_min}, {u_max}")
    upper = np.inf if u_max is None else u_max
    return np.minimum(np.maximum(z, u_min), upper) ** 2


def conv_kernel(x, xp, ux, uxp, sigma2, kind, u_min, u_max, d=None,
                form=ConvForm.ARITHMETIC) -> float:
    """Scalar convolution kernel with length scales ``h(ux)``, ``h(uxp)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    d = len(x) if d is None else d
    ha, hb = h_transform(ux, u_min, u_max), h_transform(uxp, u_min, u_max)
    if ConvForm(form) is ConvForm.ARITHMETIC:
        phi = 2.0 ** (d / 2) * ha ** (d / 4) * hb ** (d / 4) / (ha + hb) ** (d / 2)
        r = 2.0 * np.linalg.norm(x - xp) / (ha + hb)
    else:
        sq = ha * ha + hb * hb
        phi = (2.0 * ha * hb / sq) ** (d / 2)
        r = np.linalg.norm(x - xp) * np.sqrt(2.0 / sq)
    return float(sigma2 * phi * correlation(KernelKind(kind), r))


def comp_kernel(ux, uxp, base: KernelSpec) -> float:
    """Base kernel evaluated at mapped points."""
    return eval_kernel(base, ux, uxp)


def _segment_integrals(length, ua, ub, u_min):
    """Exact integral of max(u, u_min)^2 for u linear from ua to ub."""
    length, ua, ub = np.broadcast_arrays(
        np.asarray(length, float), np.asarray(ua, float), np.asarray(ub, float)
    )
    m2 = u_min * u_min
    above = (ua * ua + ua * ub + ub * ub) / 3.0
    out = np.where((ua >= u_min) & (ub >= u_min), length * above, length * m2)
    cross = (ua - u_min) * (ub - u_min) < 0
    if np.any(cross):
        a, b, L = ua[cross], ub[cross], length[cross]
        t = (u_min - a) / (b - a)
        rising = a < u_min
        low = np.where(rising, t, 1.0 - t) * L * m2
        high_end = np.where(rising, b, a)
        high = np.where(rising, 1.0 - t, t) * L * (m2 + u_min * high_end + high_end**2) / 3.0
        out = out.copy()
        out[cross] = low + high
    return out


class Warp:
    """Monotone warp ``g(x) = int_0^x max(u(z), u_min)^2 dz`` on [0, 1].

    ``u`` is the piecewise-linear interpolant of the values on the grid,
    held constant outside the grid.
    """

    def __init__(self, grid, u_values, u_min: float):
        grid = np.asarray(grid, dtype=float).reshape(-1)
        u = np.asarray(u_values, dtype=float).reshape(-1)
        if grid.shape != u.shape or len(grid) == 0:
            raise ValueError("grid and u_values must be non-empty and of equal length")
        if grid.min() < -1e-12 or grid.max() > 1 + 1e-12:
            raise ValueError("warp grid must lie in [0, 1]")
        order = np.argsort(grid, kind="stable")
        self.order = order
        self.z = np.concatenate([[0.0], grid[order]])
        self.u = np.concatenate([[u[order[0]]], u[order]])
        self.u_min = float(u_min)
        seg = _segment_integrals(np.diff(self.z), self.u[:-1], self.u[1:], self.u_min)
        self.G = np.concatenate([[0.0], np.cumsum(seg)])

    def on_grid(self) -> np.ndarray:
        """Warp at the grid points, in the original (unsorted) order."""
        out = np.empty(len(self.order))
        out[self.order] = self.G[1:]
        return out

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < -1e-12) or np.any(x > 1 + 1e-12):
            raise ValueError("warp query points must lie in [0, 1]")
        xs = x.reshape(-1)
        k = np.clip(np.searchsorted(self.z, xs, side="right") - 1, 0, len(self.z) - 1)
        ux = np.interp(xs, self.z, self.u)
        g = self.G[k] + _segment_integrals(xs - self.z[k], self.u[k], ux, self.u_min)
        return g.reshape(x.shape)


def inj_warp(u_values, grid, x_query, u_min: float):
    return Warp(grid, u_values, u_min)(x_query)


@dataclass(frozen=True)
class DeepGPConfig:
    """Deep GP prior with ``num_layers`` hidden layers below the top layer.

    ``lengthscale`` is the stationary correlation length the prior is
    initialised to; hidden layers have marginal variance ``hidden_sigma2``
    and the top layer ``top_sigma2``.
    """

    arch: Arch
    num_layers: int
    kind: KernelKind
    lengthscale: float
    top_sigma2: float
    input_dim: int
    hidden_dims: tuple = ()
    u_min: float = 0.3
    u_max: Optional[float] = None
    hidden_sigma2: float = 1.0
    conv_form: ConvForm = ConvForm.ARITHMETIC

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        object.__setattr__(self, "conv_form", ConvForm(self.conv_form))
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if self.num_layers < 1:
            raise ValueError("a deep GP needs at least one hidden layer")
        if not self.hidden_dims:
            width = self.input_dim if self.arch is Arch.COMPOSITION else 1
            object.__setattr__(self, "hidden_dims", (width,) * self.num_layers)
        object.__setattr__(self, "hidden_dims", tuple(int(w) for w in self.hidden_dims))
        if len(self.hidden_dims) != self.num_layers:
            raise ValueError("hidden_dims needs one width per hidden layer")
        if not self.u_min > 0:
            raise ValueError("u_min must be positive")
        if self.arch is Arch.INJECTIVE1D and (self.input_dim != 1 or set(self.hidden_dims) != {1}):
            raise ValueError("the injective architecture is one-dimensional")
        if self.arch is Arch.CONVOLUTION:
            if set(self.hidden_dims) != {1}:
                raise ValueError("convolution hidden layers are scalar fields")
            if self.u_max is None or not self.u_max > self.u_min:
                raise ValueError("convolution needs u_max > u_min")
        KernelSpec(self.kind, self.top_sigma2, self.lengthscale)

    @classmethod
    def from_hyperparameters(cls, arch, num_layers, kernel: KernelSpec, input_dim, **kw):
        """Deep GP initialised to the stationary kernel ``kernel``."""
        arch = Arch(arch)
        if arch is Arch.CONVOLUTION:
            root = math.sqrt(kernel.lengthscale)
            kw.setdefault("u_min", root / 4.0)
            kw.setdefault("u_max", root * 4.0)
        return cls(arch, num_layers, kernel.kind, kernel.lengthscale, kernel.sigma2,
                   input_dim, **kw)

    @property
    def layer_dims(self) -> tuple:
        return (self.input_dim,) + self.hidden_dims + (1,)

    @property
    def init_level(self) -> float:
        """Constant hidden value of the injective initialisation."""
        return max(1.0, self.u_min)

    def level_spec(self, level: int) -> KernelSpec:
        sigma2 = self.top_sigma2 if level == self.num_layers else self.hidden_sigma2
        ls = self.lengthscale
        if self.arch is Arch.INJECTIVE1D and level >= 1:
            # slope of the initial warp is init_level**2; scale so the top is stationary at ls
            ls = ls * self.init_level**2
        return KernelSpec(self.kind, sigma2, ls)

    def level_inputs(self, level: int, X, lower=None) -> LayerInputs:
        """Inputs of level ``level`` at locations ``X`` given level-1 values there."""
        X = as_points(X)
        if level == 0:
            return LayerInputs(X)
        lower = np.asarray(lower, dtype=float).reshape(len(X), -1)
        if self.arch is Arch.CONVOLUTION:
            return LayerInputs(X, h_transform(lower[:, 0], self.u_min, self.u_max), self.conv_form)
        if self.arch is Arch.COMPOSITION:
            return LayerInputs(lower)
        return LayerInputs(Warp(X[:, 0], lower[:, 0], self.u_min).on_grid()[:, None])

    def level_inputs_at(self, level: int, Xstar, lower_star, X_grid, lower_grid) -> LayerInputs:
        """Inputs of ``level`` at new points, for prediction.

        The injective warp at a new point depends on the lower layer over the
        grid only, so ``lower_star`` may be None for that architecture.
        """
        Xstar = as_points(Xstar)
        if level == 0:
            return LayerInputs(Xstar)
        if self.arch is Arch.INJECTIVE1D:
            lower_grid = np.asarray(lower_grid, dtype=float).reshape(-1)
            warp = Warp(as_points(X_grid)[:, 0], lower_grid, self.u_min)
            return LayerInputs(warp(Xstar[:, 0])[:, None])
        return self.level_inputs(level, Xstar, lower_star)

    def initial_values(self, X) -> list:
        """Hidden-layer values whose induced top kernel is stationary."""
        X = as_points(X)
        n = len(X)
        out = []
        for width in self.hidden_dims:
            if self.arch is Arch.CONVOLUTION:
                c = min(max(math.sqrt(self.lengthscale), self.u_min), self.u_max)
                out.append(np.full((n, 1), c))
            elif self.arch is Arch.INJECTIVE1D:
                out.append(np.full((n, 1), self.init_level))
            else:
                v = np.zeros((n, width))
                k = min(width, X.shape[1])
                v[:, :k] = X[:, :k]
                out.append(v)
        return out

    def init_warnings(self) -> tuple:
        msgs = []
        if self.arch is Arch.CONVOLUTION:
            root = math.sqrt(self.lengthscale)
            if not self.u_min <= root <= self.u_max:
                msgs.append(
                    f"lengthscale {self.lengthscale:.4g} outside [u_min^2, u_max^2]; "
                    "initial hidden layer clamped"
                )
        if self.arch is Arch.COMPOSITION and any(w != self.input_dim for w in self.hidden_dims):
            msgs.append("hidden width differs from input dimension; identity embedding truncated")
        return tuple(msgs)


@dataclass
class HiddenState:
    """One particle: whitened coordinates and the hidden values they realise.

    ``values[l]`` holds hidden layer l at the basis evaluation rows (all data
    rows, or the inducing rows for the fully sparse basis); ``top_values`` is
    the top hidden layer at every data row.
    """

    xi: tuple
    values: tuple
    top_values: np.ndarray
    basis: object
    warnings: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    @property
    def num_layers(self):
        return len(self.xi)


def top_layer_kernel(state: HiddenState, config: DeepGPConfig, X) -> IndexKernel:
    """Top-level covariance over the data rows given the hidden layers."""
    if state.top_values is None:
        raise RuntimeError("hidden state has no top-layer values")
    L = config.num_layers
    return IndexKernel(config.level_spec(L), config.level_inputs(L, X, state.top_values))


def init_hidden_state(config: DeepGPConfig, X, basis=None, lambda_opt: float | None = None) -> HiddenState:
    """Particle whose top-layer kernel is the stationary one at ``lambda_opt``."""
    from .lowrank import FullBasis, whiten

    if lambda_opt is not None and not math.isclose(lambda_opt, config.lengthscale):
        config = DeepGPConfig(**{**config.__dict__, "lengthscale": float(lambda_opt)})
    X = as_points(X)
    basis = FullBasis(len(X)) if basis is None else basis
    msgs = config.init_warnings()
    for msg in msgs:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    state = whiten(config.initial_values(X), basis, config, X)
    state.warnings = msgs
    return state
