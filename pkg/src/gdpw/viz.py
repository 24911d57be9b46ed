"""CSV and heatmap exports for the transition/distance maps and category-time histograms."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _stem(out) -> Path:
    out = Path(out)
    return out.with_suffix("") if out.suffix in (".csv", ".png") else out


def export_matrix(matrix: np.ndarray, row_ids, out, title: str) -> list[Path]:
    """Write ``<stem>.csv`` (first column = starting POI id) and ``<stem>.png``."""
    stem = _stem(out)
    matrix = np.asarray(matrix, dtype=np.float64)
    row_ids = np.asarray(row_ids)
    csv_path = stem.with_suffix(".csv")
    header = "poi," + ",".join(str(j) for j in range(matrix.shape[1]))
    np.savetxt(csv_path, np.column_stack([row_ids, matrix]), delimiter=",", header=header, comments="",
               fmt=["%d"] + ["%.6g"] * matrix.shape[1])

    fig, ax = plt.subplots(figsize=(8, max(2.5, min(8, 0.4 * len(row_ids) + 1.5))))
    im = ax.imshow(matrix, aspect="auto", interpolation="nearest", cmap="viridis")
    ax.set_xlabel("destination POI id")
    ax.set_ylabel("starting POI id")
    if len(row_ids) <= 20:
        ax.set_yticks(range(len(row_ids)))
        ax.set_yticklabels([str(r) for r in row_ids])
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    png_path = stem.with_suffix(".png")
    fig.savefig(png_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return [csv_path, png_path]


def read_matrix_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(np.int64), data[:, 1:]


def export_histogram(bins: np.ndarray, category: str, out) -> list[Path]:
    stem = _stem(out)
    bins = np.asarray(bins)
    csv_path = stem.with_suffix(".csv")
    with open(csv_path, "w") as fh:
        fh.write("hour,weekday,weekend\n")
        for h in range(24):
            fh.write(f"{h},{bins[h]},{bins[24 + h]}\n")

    fig, axes = plt.subplots(1, 2, figsize=(10, 3), sharey=True)
    for ax, part, name in zip(axes, (bins[:24], bins[24:]), ("weekday", "weekend")):
        ax.bar(range(24), part, color="tab:blue" if name == "weekday" else "tab:orange")
        ax.set_title(f"{category}: {name}")
        ax.set_xlabel("hour")
    axes[0].set_ylabel("check-ins")
    png_path = stem.with_suffix(".png")
    fig.savefig(png_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return [csv_path, png_path]
