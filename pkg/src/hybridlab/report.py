"""Run artifacts: grayscale heatmaps, raw-value CSVs, and figures.

PGM and CSV outputs are byte-deterministic for identical inputs; the PNG
figures rendered alongside them are for human inspection and carry no
determinism guarantee.
"""

import csv
import hashlib
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def emit_heatmap(values, path):
    """Write an 8-bit binary PGM (min-max normalized; constant grids map
    to mid-gray 128) plus a sibling CSV with the raw values."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("heatmap expects a 2-D grid")
    if not np.all(np.isfinite(values)):
        raise ValueError("heatmap values must be finite")
    lo, hi = values.min(), values.max()
    if hi > lo:
        pixels = np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.full(values.shape, 128, dtype=np.uint8)
    path = Path(path)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in values:
            writer.writerow([repr(float(v)) for v in row])
    return path


# -- figures -------------------------------------------------------------------

def save_score_figure(values, path, extent=None, title=None):
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(values, origin="lower", cmap="viridis",
                   extent=extent, aspect="auto")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def save_toy_scatter(dataset, path):
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(*dataset.train_x.T, s=4, c="tab:blue", label="inliers")
    ax.scatter(*dataset.negatives.T, s=4, c="tab:green", label="train negatives")
    ax.scatter(*dataset.anomalies.T, s=4, c="tab:red", label="test anomalies")
    ax.legend(loc="upper left", fontsize=8)
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def save_curve(values, path, ylabel="loss", xlabel="step"):
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(np.arange(len(values)), values, lw=0.8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def save_sweep_figure(b_values, metric_values, path, ylabel="AUROC"):
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(b_values, metric_values, marker="o")
    ax.set_xlabel("real-negative fraction b")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


# -- manifests -------------------------------------------------------------------

def write_manifest(run_dir, paths):
    """sha256 of every artifact, keyed by path relative to the run dir."""
    run_dir = Path(run_dir)
    entries = {}
    for path in paths:
        path = Path(path)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        entries[str(path.relative_to(run_dir))] = digest
    manifest = run_dir / "manifest.json"
    with open(manifest, "w") as fh:
        json.dump({"artifacts": dict(sorted(entries.items()))}, fh, indent=2)
        fh.write("\n")
    return manifest
