"""Report documents, run directories, CSV tables and plots."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
from pathlib import Path

import numpy as np

from . import __version__

REPORT_KEYS = ("config", "solve", "verification", "files", "version", "timestamp")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        # JSON has no inf/nan; keep them readable and round-trippable
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, Path):
        return str(obj)
    return obj


def make_run_dir(base, command):
    """Create a fresh ``<base>/<command>-<timestamp>`` directory; never reuses one."""
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S.%f")
    for k in range(1000):
        name = f"{command}-{stamp}" + (f"-{k}" if k else "")
        path = base / name
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise FileExistsError(f"could not create a fresh run directory under {base}")


class ReportDoc:
    def __init__(self, command, config):
        self.command = command
        self.doc = {
            "config": config,
            "solve": None,
            "verification": None,
            "files": {},
            "version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }
        self.extra = {"command": command}

    def __getitem__(self, key):
        return self.doc[key]

    def __setitem__(self, key, value):
        if key not in REPORT_KEYS:
            raise KeyError(f"report has no top-level key {key!r}")
        self.doc[key] = value

    def add_file(self, label, path):
        self.doc["files"][label] = str(path)

    def to_dict(self):
        return _jsonable(self.doc)

    def write(self, path):
        # full 64-bit precision: json uses the shortest round-tripping repr
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n")
        return path


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])
    return path


def write_residual_history(path, history):
    rows = [(k, e1, e2, max(e1, e2)) for k, (e1, e2) in enumerate(history)]
    return write_csv(path, ["iteration", "E1", "E2", "max"], rows)


def write_profile(path, radii, rho, values, fit_lo=None, fit_hi=None):
    rows = []
    for r, p, v in zip(radii, rho, values):
        inside = fit_lo is not None and fit_lo <= r <= fit_hi
        rows.append((float(r), float(p), float(v), int(inside)))
    return write_csv(path, ["radius", "rho", "sup_frame_norm", "in_fit_annulus"], rows)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_residual_history(path, history, tol=None):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    it = np.arange(len(history))
    h = np.array(history, dtype=float).reshape(-1, 2)
    floor = np.finfo(float).tiny
    ax.semilogy(it, np.maximum(h[:, 0], floor), "o-", label="E1")
    ax.semilogy(it, np.maximum(h[:, 1], floor), "s--", label="E2")
    if tol is not None:
        ax.axhline(tol, color="gray", lw=0.8, ls=":", label="tolerance")
    ax.set_xlabel("iteration")
    ax.set_ylabel("weighted residual")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_profile(path, rho, values, s_expected=None, fit=None):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    keep = values > 0
    ax.loglog(rho[keep], values[keep], "o", ms=3, label="angular sup of |h|")
    if s_expected is not None and keep.any():
        ref = values[keep][0] * (rho[keep] / rho[keep][0]) ** s_expected
        ax.loglog(rho[keep], ref, "--", lw=0.8, label=f"rho^{s_expected:g}")
    if fit is not None:
        ax.loglog(fit.rho, fit.values, "x", label=f"fit slope {fit.exponent:.3f}")
    ax.set_xlabel("rho")
    ax.set_ylabel("frame norm")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
