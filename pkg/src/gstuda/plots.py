"""Static figure rendering from experiment artifacts.

Everything reads files the runner wrote (debug maps, history CSVs,
sensitivity CSVs, report.csv); nothing here touches the models, so
plots can be regenerated long after a run.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .config import METHOD_ORDER

_MAP_ORDER = ("input", "pred", "truth", "abs_err")
_UNC_ORDER = ("u_epistemic", "u_aleatoric", "u_total", "mask_base", "attention")


def _read_maps(maps_dir: str) -> dict:
    manifest = os.path.join(maps_dir, "manifest.txt")
    if not os.path.exists(manifest):
        return {}
    out = {}
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name, _, dims = line.partition("=")
            h, w = (int(p) for p in dims.split())
            raw = np.fromfile(os.path.join(maps_dir, f"{name.strip()}.bin"), dtype="<f4")
            out[name.strip()] = raw.reshape(h, w).astype(np.float64)
    return out


def _cell_dirs(run_dir: str):
    cells = os.path.join(run_dir, "cells")
    if not os.path.isdir(cells):
        return []
    found = []
    for name in sorted(os.listdir(cells)):
        method, _, seed = name.rpartition("_seed")
        if method in METHOD_ORDER and seed.isdigit():
            found.append((method, int(seed), os.path.join(cells, name)))
    found.sort(key=lambda t: (METHOD_ORDER.index(t[0]), t[1]))
    return found


def plot_translation_panel(run_dir: str, out_path: str) -> bool:
    """First-slice input, prediction, truth and error per method (seed 0
    cells, or the lowest seed present)."""
    by_method = {}
    for method, seed, cell in _cell_dirs(run_dir):
        if method not in by_method:
            by_method[method] = _read_maps(os.path.join(cell, "maps"))
    by_method = {m: maps for m, maps in by_method.items() if maps}
    if not by_method:
        return False
    n_rows = len(by_method)
    fig, axes = plt.subplots(n_rows, len(_MAP_ORDER),
                             figsize=(3 * len(_MAP_ORDER), 3 * n_rows), squeeze=False)
    for r, (method, maps) in enumerate(by_method.items()):
        for c, name in enumerate(_MAP_ORDER):
            ax = axes[r][c]
            if name in maps:
                ax.imshow(maps[name], cmap="gray")
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(method, fontsize=9)
            if r == 0:
                ax.set_title(name, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return True


def plot_uncertainty_panel(run_dir: str, out_path: str) -> bool:
    """Uncertainty decomposition, mask base and attention for the first
    adapted cell that dumped them."""
    for method, seed, cell in _cell_dirs(run_dir):
        maps = _read_maps(os.path.join(cell, "maps"))
        present = [n for n in _UNC_ORDER if n in maps]
        if len(present) >= 3:
            fig, axes = plt.subplots(1, len(present), figsize=(3 * len(present), 3.2),
                                     squeeze=False)
            for c, name in enumerate(present):
                ax = axes[0][c]
                im = ax.imshow(maps[name], cmap="viridis")
                ax.set_title(f"{name}", fontsize=9)
                ax.set_xticks([])
                ax.set_yticks([])
                fig.colorbar(im, ax=ax, fraction=0.046)
            fig.suptitle(f"{method} seed {seed}", fontsize=10)
            fig.tight_layout()
            fig.savefig(out_path, dpi=110)
            plt.close(fig)
            return True
    return False


def _read_history(path: str):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: float(v) for k, v in row.items()})
    return rows


def plot_uncertainty_curve(run_dir: str, out_path: str) -> bool:
    """Per-round mean uncertainty curves with a trend annotation."""
    fig, ax = plt.subplots(figsize=(6, 4))
    drew = False
    for method, seed, cell in _cell_dirs(run_dir):
        hist_path = os.path.join(cell, "uncertainty_history.csv")
        if not os.path.exists(hist_path):
            continue
        rows = _read_history(hist_path)
        if not rows:
            continue
        rounds = [r["round"] for r in rows]
        series = [r.get("probe_u", float("nan")) for r in rows]
        if all(np.isnan(series)):
            series = [r["mean_u"] for r in rows]
        ax.plot(rounds, series, marker="o", label=f"{method} s{seed}")
        if not drew:
            trend = "decreasing" if series[-1] < series[0] else "not decreasing"
            ax.set_title(f"held-out uncertainty per round (trend: {trend})", fontsize=10)
        drew = True
    if not drew:
        plt.close(fig)
        return False
    ax.set_xlabel("round")
    ax.set_ylabel("mean total uncertainty")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return True


def _plot_sensitivity(csv_path: str, value_col: str, out_path: str) -> bool:
    if not os.path.exists(csv_path):
        return False
    groups = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault(float(row[value_col]), []).append(float(row["l1"]))
    if not groups:
        return False
    xs = sorted(groups)
    means = [float(np.mean(groups[x])) for x in xs]
    spreads = [float(np.std(groups[x])) for x in xs]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(xs, means, yerr=spreads, marker="o")
    ax.set_xlabel(value_col)
    ax.set_ylabel("target L1")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return True


def plot_run(run_dir: str, out_dir: str | None = None) -> list:
    """Render every figure the run's artifacts support; returns paths."""
    out_dir = out_dir or os.path.join(run_dir, "plots")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    jobs = (
        ("translation_panel.png", lambda p: plot_translation_panel(run_dir, p)),
        ("uncertainty_panel.png", lambda p: plot_uncertainty_panel(run_dir, p)),
        ("uncertainty_curve.png", lambda p: plot_uncertainty_curve(run_dir, p)),
        ("sensitivity_beta.png",
         lambda p: _plot_sensitivity(os.path.join(run_dir, "sensitivity_beta.csv"), "beta", p)),
        ("sensitivity_mc.png",
         lambda p: _plot_sensitivity(os.path.join(run_dir, "sensitivity_mc.csv"), "mc_samples", p)),
    )
    for name, fn in jobs:
        path = os.path.join(out_dir, name)
        if fn(path):
            written.append(path)
    return written
