"""Run configuration: a flat ``key = value`` text format with dotted keys.

Example::

    # methods to run on every fold
    methods = gpr, sparse_gpr, stride
    kernel = gaussian
    stride.S = 10
    stride.hidden_approx = aca

Values are parsed as int, float, bool or comma-separated lists; anything
else stays a string.  Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .deep_gp import Arch
from .gpr import SearchConfig
from .kernels import ConvForm, KernelKind
from .mcmc import MCMCConfig
from .stride import HiddenApprox, StrideConfig

METHODS = ("gpr", "sparse_gpr", "stride")


class ConfigError(ValueError):
    pass


def _scalar(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [_scalar(t.strip()) for t in text.split(",") if t.strip()]
    return _scalar(text)


def parse_text(text: str, source: str = "<config>") -> dict:
    """Flat mapping of dotted keys to parsed values."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key or any(not part for part in key.split(".")):
            raise ConfigError(f"{source}:{lineno}: malformed key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def nest(flat: dict) -> dict:
    """``{'a.b': 1}`` -> ``{'a': {'b': 1}}``."""
    root = {}
    for key, value in flat.items():
        node = root
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"key {key!r} nests under a scalar")
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"key {key!r} is both a section and a value")
        node[parts[-1]] = value
    return root


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class StrideSettings:
    S: int = 50
    T: int = 10
    K: int = 400
    R: int = 5
    J: int = 500
    beta: float = 0.1
    adapt: bool = True
    hidden_approx: str = "aca"
    aca_rank: Optional[int] = None
    arch: str = "composition"
    L: int = 2
    u_min: Optional[float] = None
    u_max: Optional[float] = None
    conv_form: str = "arithmetic"

    def stride_config(self, m: int, seed: int, n: Optional[int] = None) -> StrideConfig:
        J = self.J if n is None else min(self.J, n)
        mcmc = MCMCConfig(beta=self.beta, steps_per_E=self.K, adapt=self.adapt)
        return StrideConfig(S=self.S, T=self.T, R=self.R, J_size=J, m=m, mcmc=mcmc,
                            hidden_approx=HiddenApprox(self.hidden_approx),
                            aca_rank=self.aca_rank, seed=seed)


@dataclass
class SparseSettings:
    J: int = 500
    reopt_every: int = 0


@dataclass
class SearchSettings:
    starts: int = 3
    grid_points: int = 7
    sweeps: int = 2
    golden_iters: int = 20
    fixed_gamma2: Optional[float] = None

    def search_config(self) -> SearchConfig:
        return SearchConfig(starts=self.starts, grid_points=self.grid_points, sweeps=self.sweeps,
                            golden_iters=self.golden_iters, fixed_gamma2=self.fixed_gamma2)


@dataclass
class SweepSettings:
    m: list = field(default_factory=lambda: [25, 50])
    repeats: int = 5
    test_fraction: float = 0.1
    subset: Optional[int] = None


@dataclass
class ToySettings:
    m: list = field(default_factory=lambda: [10, 20, 30, 40, 50])
    L: list = field(default_factory=lambda: [2, 3, 4, 5])
    seeds: int = 5
    L_panel_m: int = 20
    m_panel_L: int = 3
    grid: int = 1001
    S: int = 10
    T: int = 10
    K: int = 1000
    R: int = 5
    u_min: float = 0.3
    hidden_approx: str = "full"
    sparse_reopt_every: int = 1


@dataclass
class RunConfig:
    methods: list = field(default_factory=lambda: list(METHODS))
    kernel: str = "gaussian"
    folds: int = 10
    m: int = 50
    has_header: bool = False
    standardize: bool = True
    seed: int = 0
    stride: StrideSettings = field(default_factory=StrideSettings)
    sparse: SparseSettings = field(default_factory=SparseSettings)
    search: SearchSettings = field(default_factory=SearchSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    toy: ToySettings = field(default_factory=ToySettings)

    def validate(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
        KernelKind(self.kernel)
        HiddenApprox(self.stride.hidden_approx)
        HiddenApprox(self.toy.hidden_approx)
        Arch(self.stride.arch)
        ConvForm(self.stride.conv_form)
        self.stride.stride_config(self.m, 0)
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        if self.m < 1 or any(int(v) < 1 for v in self.sweep.m + self.toy.m):
            raise ConfigError("inducing set sizes must be positive")
        if any(int(v) < 1 for v in self.toy.L) or self.stride.L < 1:
            raise ConfigError("layer counts must be positive")
        if not 0 < self.sweep.test_fraction < 1:
            raise ConfigError("sweep.test_fraction must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_LIST_FIELDS = {("methods",), ("sweep", "m"), ("toy", "m"), ("toy", "L")}


def _apply(obj, values: dict, path=()):
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in values.items():
        here = path + (key,)
        if key not in names:
            raise ConfigError(f"unknown config key {'.'.join(here)!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(here)!r} is a section, not a value")
            _apply(current, value, here)
            continue
        if isinstance(value, dict):
            raise ConfigError(f"{'.'.join(here)!r} is a value, not a section")
        if here in _LIST_FIELDS:
            value = _as_list(value)
        elif isinstance(value, list):
            raise ConfigError(f"{'.'.join(here)!r} takes a single value")
        setattr(obj, key, value)


def from_flat(flat: dict) -> RunConfig:
    cfg = RunConfig()
    try:
        _apply(cfg, nest(flat))
        return cfg.validate()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    flat = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from exc
        flat.update(parse_text(text, str(p)))
    flat.update(overrides or {})
    return from_flat(flat)
