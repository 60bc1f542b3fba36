"""Delimited output and figure rendering for the experiment runner.

Every experiment writes a CSV table, a JSON summary (config digest,
library version, key numbers, pass/fail when applicable) and a PNG
figure next to them.  All writers are deterministic: fixed float
formatting, sorted JSON keys, fixed figure metadata.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import __version__

_RC = {
    "figure.figsize": (6.0, 4.2),
    "font.size": 9,
    "axes.grid": True,
    "grid.linestyle": ":",
    "grid.alpha": 0.6,
    "savefig.dpi": 110,
}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{v:.17g}"
    return str(v)


def write_csv(path: str, columns: dict, header: str = "") -> None:
    names = list(columns.keys())
    arrays = [np.atleast_1d(np.asarray(columns[k])) for k in names]
    n = max(a.size for a in arrays) if arrays else 0
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write(",".join(names) + "\n")
        for i in range(n):
            row = [_fmt(a[i]) if i < a.size else "" for a in arrays]
            fh.write(",".join(row) + "\n")


def write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.bool_):
        return bool(v)
    raise TypeError(f"not JSON serializable: {type(v)}")


def summary_payload(cfg, name: str, numbers: dict, passed=None) -> dict:
    out = {
        "name": name,
        "config_digest": cfg.digest(),
        "version": __version__,
        "seed": cfg.seed,
        "numbers": numbers,
    }
    if passed is not None:
        out["pass"] = bool(passed)
    return out


def new_figure():
    fig, ax = plt.subplots(figsize=_RC["figure.figsize"])
    ax.tick_params(labelsize=_RC["font.size"])
    ax.grid(True, linestyle=":", alpha=0.6)
    return fig, ax


def save_figure(fig, path: str) -> None:
    fig.savefig(path, dpi=110, metadata={"Software": f"kleinlab {__version__}"})
    plt.close(fig)


def fig_scatter(path: str, x, y, title: str, xlabel: str = "Re",
                ylabel: str = "Im", s: float = 0.5) -> None:
    fig, ax = new_figure()
    ax.scatter(np.asarray(x), np.asarray(y), s=s, c="tab:blue", marker=".",
               linewidths=0)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_aspect("equal", adjustable="datalim")
    save_figure(fig, path)


def fig_loglog_fit(path: str, x, y, slope: float, title: str,
                   xlabel: str, ylabel: str) -> None:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    fig, ax = new_figure()
    ax.loglog(x, y, "o", ms=4, label="data")
    if x.size >= 2 and np.all(y > 0):
        c = np.exp(np.log(y[0]) - slope * np.log(x[0]))
        ax.loglog(x, c * x ** slope, "-", label=f"slope {slope:.3f}")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    save_figure(fig, path)


def fig_lines(path: str, x, series: dict, title: str, xlabel: str,
              ylabel: str, logy: bool = False) -> None:
    fig, ax = new_figure()
    for label, y in series.items():
        ax.plot(np.asarray(x), np.asarray(y), marker="o", ms=3, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if series:
        ax.legend()
    save_figure(fig, path)


def fig_hist(path: str, edges, density, title: str, xlabel: str) -> None:
    fig, ax = new_figure()
    ax.stairs(np.asarray(density), np.asarray(edges), fill=True, alpha=0.7)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    save_figure(fig, path)


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
