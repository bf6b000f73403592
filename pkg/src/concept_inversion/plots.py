"""Figures for an evaluation report."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .evaluation import EvalReport  # noqa: E402

_PNG = {"Software": None}


def _slug(concept: str) -> str:
    return concept.strip("<>")


def accuracy_bars(report: EvalReport, concept: str, path) -> Path:
    """Paired erased / CI bars per method with the base accuracy as a dashed line."""
    methods = [m for c, m in report.cells() if c == concept]
    erased = [100 * (report.accuracy(concept, m, "erased") or 0.0) for m in methods]
    ci = [100 * (report.accuracy(concept, m, "ci") or 0.0) for m in methods]
    x = np.arange(len(methods))
    fig, ax = plt.subplots(figsize=(1.2 * len(methods) + 2, 3.2))
    ax.bar(x - 0.2, erased, 0.4, label="erased")
    ax.bar(x + 0.2, ci, 0.4, label="concept inversion")
    base = report.accuracy(concept, "base", "base")
    if base is not None:
        ax.axhline(100 * base, color="k", ls="--", lw=1, label="base")
    ax.set_xticks(x, methods)
    ax.set_ylim(0, 100)
    ax.set_ylabel("classifier accuracy (%)")
    ax.set_title(concept)
    ax.legend(fontsize=8, loc="upper right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG)
    plt.close(fig)
    return path


def grid_sheet(report: EvalReport, concept: str, path) -> Path | None:
    """One row per method (erased, CI) built from the sample grids the report points at."""
    rows = []
    for _, method in [cell for cell in report.cells() if cell[0] == concept]:
        pair = [report.get(concept, method, s) for s in ("erased", "ci")]
        files = [r.grid for r in pair if r is not None and r.grid and Path(r.grid).exists()]
        if len(files) == 2:
            rows.append((method, [np.asarray(Image.open(f)) for f in files]))
    if not rows:
        return None
    fig, axes = plt.subplots(len(rows), 2, figsize=(6, 1.6 * len(rows)), squeeze=False)
    for (method, imgs), ax_row in zip(rows, axes):
        for ax, img, stage in zip(ax_row, imgs, ("erased", "CI")):
            ax.imshow(img, cmap="gray", vmin=0, vmax=255)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_title(f"{method} {stage}", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG)
    plt.close(fig)
    return path


def emit_plots(report: EvalReport, outdir) -> list[Path]:
    """Write ``bars_<concept>.png`` and ``grids_<concept>.png`` for each concept in the report."""
    if not report.cells():
        raise ValueError("report has no erasure cells to plot")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for concept in dict.fromkeys(c for c, _ in report.cells()):
        paths.append(accuracy_bars(report, concept, outdir / f"bars_{_slug(concept)}.png"))
        sheet = grid_sheet(report, concept, outdir / f"grids_{_slug(concept)}.png")
        if sheet is not None:
            paths.append(sheet)
    return paths
