"""Run reports: JSON-lines records, a summary document and curve exports."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

RECORD_KEYS = ("method", "seed", "fold", "m", "L", "arch", "hidden_approx", "smse", "mnll",
               "fit_seconds", "predict_seconds", "acceptance_rate", "F_t_trace", "status")
TIMING_KEYS = ("fit_seconds", "predict_seconds")


def _clean(value):
    """JSON-safe copy; non-finite floats become null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def make_record(method, seed, fold=None, **fields) -> dict:
    rec = {k: None for k in RECORD_KEYS}
    rec.update(method=method, seed=seed, fold=fold, status="ok")
    rec.update(fields)
    return _clean(rec)


class ReportWriter:
    """Appends one JSON object per line to ``report.jsonl`` in ``out_dir``.

    The writer is the only place records are serialised; callers hand it
    records in a deterministic order.
    """

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.out_dir / "report.jsonl"
        self.records = []
        self._fh = self.path.open("w", encoding="utf-8")

    def write(self, record: dict):
        self.records.append(record)
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def cell_stats(records, keys=("method", "m", "L")) -> list:
    """Mean and standard deviation of SMSE and MNLL per cell of ``keys``."""
    groups = defaultdict(list)
    for r in records:
        if r.get("status") != "ok":
            continue
        groups[tuple(r.get(k) for k in keys)].append(r)
    out = []
    for key in groups:  # first-seen order, which follows the record order
        rs = groups[key]
        row = dict(zip(keys, key))
        row["count"] = len(rs)
        for metric in ("smse", "mnll"):
            vals = np.array([r[metric] for r in rs if r.get(metric) is not None], dtype=float)
            row[f"{metric}_mean"] = float(vals.mean()) if len(vals) else None
            row[f"{metric}_std"] = float(vals.std()) if len(vals) else None
        out.append(row)
    return out


def write_summary(out_dir, command: str, config: dict, cells: list, extra=None) -> Path:
    doc = {
        "command": command,
        "software_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": _clean(config),
        "cells": _clean(cells),
    }
    if extra:
        doc.update(_clean(extra))
    path = Path(out_dir) / "summary.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_curve(path, x_name: str, y_name: str, points) -> Path:
    """Two-column CSV for external plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([x_name, y_name])
        for x, y in points:
            w.writerow([x, "" if y is None else repr(float(y))])
    return path


def write_curves(out_dir, prefix: str, cells, x_key: str, select=lambda c: True) -> list:
    """Mean and std SMSE curves against ``x_key``, one pair of files per method."""
    by_method = defaultdict(list)
    for c in cells:
        if select(c) and c.get(x_key) is not None:
            by_method[c["method"]].append(c)
    paths = []
    for method, cs in sorted(by_method.items()):
        cs = sorted(cs, key=lambda c: c[x_key])
        base = Path(out_dir) / "curves"
        paths.append(write_curve(base / f"{prefix}_{method}_mean.csv", x_key, "smse_mean",
                                 [(c[x_key], c["smse_mean"]) for c in cs]))
        paths.append(write_curve(base / f"{prefix}_{method}_std.csv", x_key, "smse_std",
                                 [(c[x_key], c["smse_std"]) for c in cs]))
    return paths
