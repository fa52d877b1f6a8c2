"""Report figures written next to the CSV outputs."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_costs(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v not in ("", None) else float("nan")) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def plot_costs(runs, out_path, title: str = "training cost"):
    """Cost curves per epoch.

    ``runs`` maps a label to a history (list of dicts with epoch/total/loc_term/
    seg_term) or to a costs.csv path; a bare history is plotted unlabelled.
    """
    if not isinstance(runs, dict):
        runs = {"": runs}
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for label, hist in runs.items():
        if isinstance(hist, (str, Path)):
            hist = read_costs(hist)
        ep = [r["epoch"] for r in hist]
        for ax, key in zip(axes, ("total", "loc_term", "seg_term")):
            ax.plot(ep, [r[key] for r in hist], marker=".", label=label or None)
    for ax, key in zip(axes, ("total", "loc_term", "seg_term")):
        ax.set_title(key)
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
        ax.grid(alpha=0.3)
    if any(runs):
        axes[0].legend()
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def plot_jaccard(rows, out_path, title: str = "per-image Jaccard"):
    """Histogram of per-sample Jaccard with the mean marked."""
    j = np.array([r["jaccard"] for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.hist(j, bins=np.linspace(0, 1, 21), color="tab:blue", alpha=0.8)
    if j.size:
        ax.axvline(j.mean(), color="k", ls="--", label=f"mean {j.mean():.3f}")
        ax.legend()
    ax.set_xlabel("Jaccard")
    ax.set_ylabel("images")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def plot_percentiles(percentiles, out_path, title: str = "chain best vs enumeration"):
    p = np.asarray(percentiles, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.hist(p, bins=np.linspace(0, 100, 21), color="tab:green", alpha=0.8)
    ax.axvline(90, color="k", ls=":", label="90th percentile")
    ax.set_xlabel("percentile of chain best within 625 lattice scores")
    ax.set_ylabel("samples")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)
