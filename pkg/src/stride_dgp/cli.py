"""Command-line harness: toy study, cross-validated benchmark, m-sweep, fit, predict.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (for multi-run commands: at least one recorded failure).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .archive import ArchiveError, load_model, save_model
from .config import ConfigError, RunConfig, load_config, parse_value
from .data import (DataError, Dataset, kfold_split, load_csv, load_features, mnll, random_split,
                   smse, toy_dataset, toy_truth_vector, TOY_NOISE_STD)
from .deep_gp import Arch
from .experiments import DeepSettings, fit_sparse, run_gpr, run_sparse, run_stride
from .gpr import SearchConfig
from .mcmc import MCMCConfig
from .numerics import SingularMatrixError
from .reports import ReportWriter, cell_stats, make_record, write_curves, write_summary
from .stride import HiddenApprox, StrideConfig, StrideFitError, stride_predict

log = logging.getLogger("stride_dgp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
NUMERIC_ERRORS = (SingularMatrixError, np.linalg.LinAlgError, StrideFitError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def derive_seed(*keys) -> int:
    """Independent integer seed for a (run seed, fold, ...) key."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def default_threads() -> int:
    raw = os.environ.get("STRIDE_THREADS")
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"STRIDE_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise UsageError("STRIDE_THREADS must be at least 1")
    return value


def parallel_map(fn, items, threads):
    """Ordered map; results are yielded in input order whatever the schedule."""
    if threads <= 1 or len(items) <= 1:
        for it in items:
            yield fn(it)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(fn, items)


def _failure(method, seed, fold, exc, **fields):
    log.warning("%s failed (seed %s, fold %s): %s", method, seed, fold, exc)
    return make_record(method, seed, fold, status="failed", error=f"{type(exc).__name__}: {exc}",
                       **fields)


def _stride_fields(res, deep: DeepSettings, approx: str):
    return dict(L=deep.num_layers, arch=Arch(deep.arch).value, hidden_approx=approx,
                acceptance_rate=res.extra["acceptance_rate"], F_t_trace=res.extra["F_t_trace"])


# --------------------------------------------------------------------------- toy


def _toy_job(args):
    cfg, seed, grid, truth = args
    toy = cfg.toy
    data = toy_dataset(seed)
    gamma2 = TOY_NOISE_STD**2
    search = SearchConfig(starts=cfg.search.starts, grid_points=cfg.search.grid_points,
                          sweeps=cfg.search.sweeps, golden_iters=cfg.search.golden_iters,
                          fixed_gamma2=gamma2)
    kind = "matern32"
    n = data.n
    records = []

    def score(mean, g2):
        return dict(smse=smse(truth, mean), mnll=mnll(truth, mean, g2))

    try:
        res = run_gpr(data.X, data.y, grid, kind, search, None)
        records.append(make_record("gpr", seed, fit_seconds=res.fit_seconds,
                                   predict_seconds=res.predict_seconds, **score(res.mean, res.gamma2)))
    except NUMERIC_ERRORS as exc:
        records.append(_failure("gpr", seed, None, exc))

    hypers = {}
    for m in toy.m:
        try:
            res = run_sparse(data.X, data.y, grid, kind, m, n, search,
                             np.random.default_rng([seed, m]), reopt_every=toy.sparse_reopt_every)
            hypers[m] = (res.kernel, res.gamma2)
            records.append(make_record("sparse_gpr", seed, m=m, fit_seconds=res.fit_seconds,
                                       predict_seconds=res.predict_seconds,
                                       **score(res.mean, res.gamma2)))
        except NUMERIC_ERRORS as exc:
            records.append(_failure("sparse_gpr", seed, None, exc, m=m))

    combos = [(m, toy.m_panel_L) for m in toy.m] + [(toy.L_panel_m, L) for L in toy.L]
    seen = set()
    for m, L in combos:
        if (m, L) in seen:
            continue
        seen.add((m, L))
        deep = DeepSettings(Arch.INJECTIVE1D, L, u_min=toy.u_min)
        try:
            if m not in hypers:
                k, g2, _ = fit_sparse(data.X, data.y, kind, m, n, search,
                                      np.random.default_rng([seed, m]), toy.sparse_reopt_every)
                hypers[m] = (k, g2)
            kernel, g2 = hypers[m]
            scfg = StrideConfig(S=toy.S, T=toy.T, R=toy.R, J_size=n, m=m,
                                mcmc=MCMCConfig(steps_per_E=toy.K),
                                hidden_approx=HiddenApprox(toy.hidden_approx),
                                seed=derive_seed(seed, m, L))
            res, _ = run_stride(data.X, data.y, grid, deep, scfg, kernel, g2)
            records.append(make_record("stride", seed, m=m, fit_seconds=res.fit_seconds,
                                       predict_seconds=res.predict_seconds,
                                       **_stride_fields(res, deep, toy.hidden_approx),
                                       **score(res.mean, g2)))
        except NUMERIC_ERRORS as exc:
            records.append(_failure("stride", seed, None, exc, m=m, L=L))
    return records


def toy_study(cfg: RunConfig, out_dir, base_seed: int = 0, threads: int = 1) -> list:
    """Runs the 1D toy over seeds; returns the records written."""
    grid = np.linspace(0.0, 1.0, cfg.toy.grid)[:, None]
    truth = toy_truth_vector(grid[:, 0])
    seeds = [base_seed + i for i in range(cfg.toy.seeds)]
    with ReportWriter(out_dir) as writer:
        for recs in parallel_map(_toy_job, [(cfg, s, grid, truth) for s in seeds], threads):
            for r in recs:
                writer.write(r)
        records = writer.records
    cells = cell_stats(records)
    toy = cfg.toy
    # the exact GP does not depend on m or L: repeat its cell along both axes
    gpr = [c for c in cells if c["method"] == "gpr"]
    sparse = [c for c in cells if c["method"] == "sparse_gpr"]
    stride = [c for c in cells if c["method"] == "stride"]
    m_panel = ([dict(c, m=m) for c in gpr for m in toy.m] + sparse
               + [c for c in stride if c["L"] == toy.m_panel_L])
    L_panel = ([dict(c, L=L) for c in gpr for L in toy.L]
               + [dict(c, L=L) for c in sparse if c["m"] == toy.L_panel_m for L in toy.L]
               + [c for c in stride if c["m"] == toy.L_panel_m])
    write_curves(out_dir, "toy_m", m_panel, "m")
    write_curves(out_dir, "toy_L", L_panel, "L")
    write_summary(out_dir, "toy1d", cfg.to_dict(), cells, {"seeds": seeds})
    return records


# ----------------------------------------------------------------- benchmarks


def evaluate_split(cfg: RunConfig, train: Dataset, test: Dataset, m: int, seed: int, fold) -> list:
    """Fit every requested method on ``train`` and score on ``test``."""
    if m > train.n and any(mth != "gpr" for mth in cfg.methods):
        raise DataError(f"m = {m} inducing points exceeds the {train.n} training rows")
    std = train.standardize() if cfg.standardize else train
    Xte = std.apply_features(test.X)
    search = cfg.search.search_config()
    kind = cfg.kernel
    records = []
    rng_key = [seed] + ([fold] if fold is not None else []) + [m]

    def score(mean, g2):
        mean = std.destandardize_target(mean)
        return dict(smse=smse(test.y, mean), mnll=mnll(test.y, mean, g2 * std.target_std**2))

    J = min(cfg.sparse.J, std.n)
    sparse_fit = None
    for method in cfg.methods:
        try:
            if method == "gpr":
                res = run_gpr(std.X, std.y, Xte, kind, search, np.random.default_rng(rng_key + [0]))
                fields = {}
            elif method == "sparse_gpr":
                res = run_sparse(std.X, std.y, Xte, kind, m, J, search,
                                 np.random.default_rng(rng_key + [1]), cfg.sparse.reopt_every)
                sparse_fit = (res.kernel, res.gamma2)
                fields = dict(m=m)
            else:
                if sparse_fit is None:
                    k, g2, _ = fit_sparse(std.X, std.y, kind, m, J, search,
                                          np.random.default_rng(rng_key + [1]), cfg.sparse.reopt_every)
                    sparse_fit = (k, g2)
                st = cfg.stride
                deep = DeepSettings(Arch(st.arch), st.L, st.u_min, st.u_max, st.conv_form)
                scfg = st.stride_config(m, derive_seed(*rng_key, 2), n=std.n)
                res, _ = run_stride(std.X, std.y, Xte, deep, scfg, *sparse_fit,
                                    standardization=std.standardization())
                fields = dict(m=m, **_stride_fields(res, deep, st.hidden_approx))
            records.append(make_record(method, seed, fold, fit_seconds=res.fit_seconds,
                                       predict_seconds=res.predict_seconds,
                                       **fields, **score(res.mean, res.gamma2)))
        except NUMERIC_ERRORS as exc:
            extra = {"completed_iterations": exc.iteration} if isinstance(exc, StrideFitError) else {}
            records.append(_failure(method, seed, fold, exc, m=m if method != "gpr" else None, **extra))
    return records


def _bench_job(args):
    cfg, data, train_idx, test_idx, seed, fold, m = args
    return evaluate_split(cfg, data.subset(train_idx), data.subset(test_idx), m, seed, fold)


def benchmark(cfg: RunConfig, data: Dataset, out_dir, seed: int, threads: int = 1) -> list:
    if data.n < cfg.folds:
        raise DataError(f"{cfg.folds}-fold cross-validation needs at least {cfg.folds} rows, got {data.n}")
    folds = kfold_split(data.n, cfg.folds, np.random.default_rng([seed, 0]))
    jobs = [(cfg, data, tr, te, seed, k, cfg.m) for k, (tr, te) in enumerate(folds)]
    with ReportWriter(out_dir) as writer:
        for recs in parallel_map(_bench_job, jobs, threads):
            for r in recs:
                writer.write(r)
        records = writer.records
    write_summary(out_dir, "benchmark", cfg.to_dict(), cell_stats(records, ("method", "m")),
                  {"seed": seed, "n": data.n, "d": data.d})
    return records


def _sweep_job(args):
    cfg, data, seed, repeat, m = args
    rng = np.random.default_rng([seed, 1, repeat])
    pool = np.arange(data.n)
    if cfg.sweep.subset is not None and cfg.sweep.subset < data.n:
        pool = np.sort(rng.choice(data.n, size=cfg.sweep.subset, replace=False))
    tr, te = random_split(len(pool), cfg.sweep.test_fraction, rng)
    return evaluate_split(cfg, data.subset(pool[tr]), data.subset(pool[te]), m, seed, repeat)


def sweep_m(cfg: RunConfig, data: Dataset, out_dir, seed: int, threads: int = 1) -> list:
    """Repeated random splits for every m; splits are shared across m."""
    jobs = [(cfg, data, seed, r, int(m)) for m in cfg.sweep.m for r in range(cfg.sweep.repeats)]
    with ReportWriter(out_dir) as writer:
        for recs in parallel_map(_sweep_job, jobs, threads):
            for r in recs:
                writer.write(r)
        records = writer.records
    cells = cell_stats(records, ("method", "m"))
    write_curves(out_dir, "sweep_m", [c for c in cells if c["m"] is not None], "m")
    write_summary(out_dir, "sweep-m", cfg.to_dict(), cells, {"seed": seed, "n": data.n, "d": data.d})
    return records


# ---------------------------------------------------------------- fit/predict


def fit_model(cfg: RunConfig, data: Dataset, out_path, seed: int):
    if cfg.m > data.n:
        raise DataError(f"m = {cfg.m} inducing points exceeds the {data.n} training rows")
    std = data.standardize() if cfg.standardize else data
    rng = np.random.default_rng([seed, 3])
    search = cfg.search.search_config()
    t0 = time.perf_counter()
    kernel, g2, _ = fit_sparse(std.X, std.y, cfg.kernel, cfg.m, min(cfg.sparse.J, std.n), search, rng,
                               cfg.sparse.reopt_every)
    st = cfg.stride
    deep = DeepSettings(Arch(st.arch), st.L, st.u_min, st.u_max, st.conv_form)
    scfg = st.stride_config(cfg.m, derive_seed(seed, 3), n=std.n)
    from .stride import stride_fit

    model = stride_fit(std.X, std.y, deep.build(kernel, std.d), scfg, g2,
                       std.standardization() if cfg.standardize else None)
    save_model(model, out_path)
    return model, time.perf_counter() - t0


def predict_to_csv(model, Xstar, out_path):
    """Destandardised mixture mean and variance at raw inputs ``Xstar``."""
    d = model.X.shape[1]
    Xstar = np.asarray(Xstar, dtype=float).reshape(-1, d) if len(Xstar) else np.zeros((0, d))
    st = model.standardization
    if len(Xstar):
        Z = Xstar
        if st and st.get("feature_means") is not None:
            Z = (Xstar - np.asarray(st["feature_means"])) / np.asarray(st["feature_stds"])
        mean, var, _ = stride_predict(model, Z)
        if st:
            mean = mean * st["target_std"] + st["target_mean"]
            var = var * st["target_std"] ** 2
    else:
        mean, var = np.zeros(0), np.zeros(0)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(d)] + ["mean", "variance"])
        for x, mu, v in zip(Xstar, mean, var):
            w.writerow([repr(float(t)) for t in x] + [repr(float(mu)), repr(float(v))])
    return mean, var


# ------------------------------------------------------------------ argparse


def _int_list(text):
    vals = parse_value(text)
    vals = vals if isinstance(vals, list) else [vals]
    if not all(isinstance(v, int) for v in vals):
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--out", help="output directory (file for fit/predict)")
    common.add_argument("--seed", type=int, default=None, help="base seed (overrides config)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for folds/seeds (default: $STRIDE_THREADS or 1)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; repeatable")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="stride", description="Deep GP regression with selected inducing points.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("toy1d", parents=[common], help="1D toy study over m and L")
    p.add_argument("--m", type=_int_list, help="inducing set sizes, e.g. 10,20,30")
    p.add_argument("--L", type=_int_list, help="hidden layer counts, e.g. 2,3")
    p.add_argument("--seeds", type=int, help="number of noise realisations")

    for name, text in (("benchmark", "k-fold cross-validation on a CSV dataset"),
                       ("sweep-m", "repeated random splits over inducing set sizes"),
                       ("fit", "fit STRIDE on a CSV dataset and save the model")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", required=True, help="CSV: features then target")

    p = sub.add_parser("predict", parents=[common], help="predict with a saved model")
    p.add_argument("--model", required=True, help="model archive written by 'fit'")
    p.add_argument("--data", required=True, help="CSV of feature columns")
    return parser


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        threads = args.threads if args.threads is not None else default_threads()
        if threads < 1:
            raise UsageError("--threads must be at least 1")
        overrides = _overrides(args.set)
        if args.command == "toy1d":
            for key, val in (("toy.m", args.m), ("toy.L", args.L), ("toy.seeds", args.seeds)):
                if val is not None:
                    overrides[key] = val
        cfg = load_config(args.config, overrides)
        seed = args.seed if args.seed is not None else cfg.seed
        if args.out is None:
            raise UsageError("--out is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"stride: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"stride: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "toy1d":
            records = toy_study(cfg, args.out, seed, threads)
        elif args.command in ("benchmark", "sweep-m"):
            data = load_csv(args.data, cfg.has_header)
            fn = benchmark if args.command == "benchmark" else sweep_m
            records = fn(cfg, data, args.out, seed, threads)
        elif args.command == "fit":
            data = load_csv(args.data, cfg.has_header)
            model, seconds = fit_model(cfg, data, args.out, seed)
            print(json.dumps({"model": str(args.out), "fit_seconds": seconds, "n": data.n,
                              "m": model.inducing.m}))
            return EXIT_OK
        else:
            model = load_model(args.model)
            X = load_features(args.data, model.X.shape[1], cfg.has_header)
            t0 = time.perf_counter()
            predict_to_csv(model, X, args.out)
            print(json.dumps({"predictions": str(args.out), "rows": len(X),
                              "predict_seconds": time.perf_counter() - t0}))
            return EXIT_OK
    except (DataError, ArchiveError, OSError) as exc:
        print(f"stride: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"stride: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    failed = [r for r in records if r.get("status") != "ok"]
    print(json.dumps({"out": str(args.out), "records": len(records), "failed": len(failed)}))
    return EXIT_NUMERIC if failed else EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
