"""Figure rendering for the delimited outputs.

Every report path writes its figures next to the CSVs: training curves,
deployment RSSI traces (mean line, std band), the noise sweep, and
coverage heatmaps.  Headless backend; PNG output.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.figsize": (6.4, 4.0),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})

METHOD_COLORS = {
    "allocator": "tab:blue",
    "no_compat": "tab:orange",
    "no_allocator": "tab:green",
    "random": "tab:red",
}


def _rolling_mean(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(values) < 2:
        return values
    window = min(window, len(values))
    kernel = np.ones(window) / window
    padded = np.concatenate([np.full(window - 1, values[0]), values])
    return np.convolve(padded, kernel, mode="valid")


def read_training_curve(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """{method: (episodes, mean_rewards)} from a training_curve.csv."""
    per_method: dict[str, list[tuple[int, float]]] = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per_method[row["method"]].append((int(row["episode"]), float(row["mean_reward"])))
    out = {}
    for method, rows in per_method.items():
        rows.sort()
        eps, rew = zip(*rows)
        out[method] = (np.asarray(eps), np.asarray(rew))
    return out


def plot_training_curve(csv_paths, out_path: str | Path, window: int = 25) -> Path:
    """Episode-averaged reward per method, lightly smoothed."""
    fig, ax = plt.subplots()
    for path in csv_paths:
        for method, (eps, rew) in read_training_curve(path).items():
            color = METHOD_COLORS.get(method)
            ax.plot(eps, _rolling_mean(rew, window), label=method, color=color)
            ax.plot(eps, rew, alpha=0.15, color=color)
    ax.set_xlabel("episode")
    ax.set_ylabel("episode mean reward")
    ax.legend()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_eval_rssi(reports, out_path: str | Path) -> Path:
    """Deployment RSSI per timestep: mean line, std band across users."""
    fig, ax = plt.subplots()
    for rep in reports:
        steps = np.arange(rep.rssi_dbm.shape[0])
        mean = rep.rssi_dbm.mean(axis=1)
        std = rep.rssi_dbm.std(axis=1)
        label = f"{rep.method} (sigma={rep.sigma_err:g})"
        color = METHOD_COLORS.get(rep.method)
        ax.plot(steps, mean, label=label, color=color)
        ax.fill_between(steps, mean - std, mean + std, alpha=0.2, color=color)
    ax.set_xlabel("timestep")
    ax.set_ylabel("RSSI (dBm)")
    ax.legend()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_noise_sweep(reports, out_path: str | Path) -> Path:
    """Mean deployment RSSI vs localization error, std band."""
    reports = sorted(reports, key=lambda r: r.sigma_err)
    sigmas = np.array([r.sigma_err for r in reports])
    means = np.array([r.mean_rssi_dbm for r in reports])
    stds = np.array([r.std_rssi_dbm for r in reports])
    fig, ax = plt.subplots()
    ax.plot(sigmas, means, marker="o")
    ax.fill_between(sigmas, means - stds, means + stds, alpha=0.2)
    ax.set_xlabel("localization error std (m)")
    ax.set_ylabel("mean RSSI (dBm)")
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_coverage(matrix: np.ndarray, grid, out_path: str | Path) -> Path:
    """Heatmap of a coverage map (dBm) over the sampled region."""
    fig, ax = plt.subplots()
    shown = ax.imshow(
        matrix,
        origin="lower",
        extent=(grid.x_min, grid.x_max, grid.y_min, grid.y_max),
        aspect="equal",
        cmap="viridis",
    )
    fig.colorbar(shown, ax=ax, label="RSSI (dBm)")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.grid(False)
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)
