"""Saving and loading fitted STRIDE models.

An archive is a single ``.npz`` file.  Arrays are stored under flat names;
everything else goes into a JSON document under ``__meta__`` that carries a
format version.  Loading an archive with a different format version fails
instead of guessing.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import __version__
from .deep_gp import DeepGPConfig, HiddenState
from .kernels import KernelSpec
from .lowrank import AcaBasis, FullBasis, SparseBasis
from .mcmc import Chain, MCMCConfig
from .sparse import InducingSet
from .stride import StrideConfig, StrideModel, _unique

FORMAT_VERSION = 1


class ArchiveError(ValueError):
    pass


class ArchiveVersionError(ArchiveError):
    pass


def _basis_meta(basis) -> dict:
    if isinstance(basis, FullBasis):
        return {"type": "full", "n": basis.n}
    if isinstance(basis, AcaBasis):
        return {"type": "aca", "n": basis.n, "indices": list(basis.indices)}
    if isinstance(basis, SparseBasis):
        k = basis.interp_kernel
        return {"type": "sparse", "n": basis.inducing.n_total, "indices": list(basis.inducing.indices),
                "kernel": [k.kind.value, k.sigma2, k.lengthscale], "gamma2": basis.interp_gamma2}
    raise ArchiveError(f"cannot serialise basis of type {type(basis).__name__}")


def _basis_from(meta: dict):
    kind = meta["type"]
    if kind == "full":
        return FullBasis(meta["n"])
    if kind == "aca":
        return AcaBasis(tuple(meta["indices"]), meta["n"])
    if kind == "sparse":
        k, s2, ls = meta["kernel"]
        return SparseBasis(InducingSet(tuple(meta["indices"]), meta["n"]), KernelSpec(k, s2, ls),
                           meta["gamma2"])
    raise ArchiveError(f"unknown basis type {kind!r}")


def _config_meta(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = _config_meta(v)
        elif hasattr(v, "value"):
            v = v.value
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def save_model(model: StrideModel, path) -> Path:
    path = Path(path)
    states, _ = _unique(model.particles)
    slot = {id(s): k for k, s in enumerate(states)}
    arrays = {"X": model.X, "y": model.y}
    particles = []
    for k, s in enumerate(states):
        for level, (xi, v) in enumerate(zip(s.xi, s.values)):
            arrays[f"p{k}_xi{level}"] = np.asarray(xi)
            arrays[f"p{k}_v{level}"] = np.asarray(v)
        arrays[f"p{k}_top"] = np.asarray(s.top_values)
        particles.append({"basis": _basis_meta(s.basis), "warnings": list(s.warnings)})
    meta = {
        "format_version": FORMAT_VERSION,
        "software_version": __version__,
        "gamma2": model.gamma2,
        "inducing": list(model.inducing.indices),
        "initial_inducing": None if model.initial_inducing is None else list(model.initial_inducing.indices),
        "dgp": _config_meta(model.dgp),
        "stride": _config_meta(model.config),
        "particles": particles,
        "chains": [{"state": slot[id(c.state)], "beta": c.beta, "accepted": c.accepted,
                    "proposed": c.proposed} for c in model.chains],
        "trace": model.trace,
        "standardization": model.standardization,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_model(path) -> StrideModel:
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ArchiveError(f"cannot read model archive {path}: {exc}") from exc
    with data:
        if "__meta__" not in data.files:
            raise ArchiveError(f"{path} is not a model archive (no metadata)")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise ArchiveVersionError(
                f"{path}: archive format version {version!r}, this build reads {FORMAT_VERSION}"
            )
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    dgp = DeepGPConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["dgp"].items()})
    sc = dict(meta["stride"])
    sc["mcmc"] = MCMCConfig(**sc["mcmc"])
    scfg = StrideConfig(**sc)
    n = len(arrays["y"])
    states = []
    for k, p in enumerate(meta["particles"]):
        L = dgp.num_layers
        states.append(HiddenState(
            tuple(arrays[f"p{k}_xi{l}"] for l in range(L)),
            tuple(arrays[f"p{k}_v{l}"] for l in range(L)),
            arrays[f"p{k}_top"], _basis_from(p["basis"]), tuple(p["warnings"]),
        ))
    chains = [Chain(states[c["state"]], c["beta"], c["accepted"], c["proposed"]) for c in meta["chains"]]
    initial = meta["initial_inducing"]
    return StrideModel(
        chains, InducingSet(tuple(meta["inducing"]), n), dgp, scfg, arrays["X"], arrays["y"],
        meta["gamma2"], meta["trace"], None if initial is None else InducingSet(tuple(initial), n),
        meta["standardization"],
    )
