"""Figure emission behind a small writer interface.

``FigureWriter`` renders PNGs with the Agg backend and always writes the
underlying matrices/curves as CSV next to them. ``NullWriter`` writes only the
CSV files, for headless runs that must not depend on a plotting stack.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

# PNG metadata is pinned so identical inputs give identical bytes.
_PNG_META = {"Software": None}


def write_matrix_csv(path: str | Path, M: np.ndarray, labels: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    M = np.asarray(M, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if labels is not None:
            w.writerow([""] + list(labels))
        for i, row in enumerate(M):
            lead = [labels[i]] if labels is not None else []
            w.writerow(lead + [repr(float(v)) for v in row])
    return path


def write_curves_csv(path: str | Path, curves: dict[str, Sequence[float]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(curves)
    n = max((len(curves[k]) for k in names), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + names)
        for i in range(n):
            w.writerow([i] + [repr(float(curves[k][i])) if i < len(curves[k]) else "" for k in names])
    return path


class NullWriter:
    """Emits CSV files only; returns the paths written."""

    def heatmap_pair(self, left: np.ndarray, right: np.ndarray, path: str | Path,
                     titles=("learned A", "A_GT"), labels: Sequence[str] | None = None) -> list[Path]:
        path = Path(path)
        return [
            write_matrix_csv(path.with_name(path.stem + "_left.csv"), left, labels),
            write_matrix_csv(path.with_name(path.stem + "_right.csv"), right, labels),
        ]

    def curves(self, curves: dict[str, Sequence[float]], path: str | Path, title: str = "") -> list[Path]:
        path = Path(path)
        return [write_curves_csv(path.with_suffix(".csv"), curves)]


class FigureWriter(NullWriter):
    """Matplotlib (Agg) figures plus the CSV files of ``NullWriter``."""

    def __init__(self, dpi: int = 100):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        self.plt = plt
        self.dpi = dpi

    def _save(self, fig, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=self.dpi, metadata=_PNG_META)
        self.plt.close(fig)
        return path

    def heatmap_pair(self, left, right, path, titles=("learned A", "A_GT"), labels=None) -> list[Path]:
        path = Path(path).with_suffix(".png")
        out = super().heatmap_pair(left, right, path, titles, labels)
        fig, axes = self.plt.subplots(1, 2, figsize=(9, 4))
        for ax, M, title in zip(axes, (left, right), titles):
            M = np.abs(np.asarray(M, dtype=float))
            im = ax.imshow(M, cmap="viridis", vmin=0.0, vmax=max(float(M.max()), 1e-12))
            ax.set_title(title)
            if labels is not None:
                ax.set_xticks(range(len(labels)), labels, rotation=90, fontsize=7)
                ax.set_yticks(range(len(labels)), labels, fontsize=7)
            ax.set_xlabel("target i")
            ax.set_ylabel("source j")
            fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        return [self._save(fig, path)] + out

    def curves(self, curves, path, title: str = "") -> list[Path]:
        path = Path(path).with_suffix(".png")
        out = super().curves(curves, path, title)
        fig, ax = self.plt.subplots(figsize=(6, 4))
        for name in sorted(curves):
            ax.plot(np.arange(len(curves[name])), curves[name], label=name)
        ax.set_xlabel("epoch")
        ax.set_yscale("symlog")
        if title:
            ax.set_title(title)
        if curves:
            ax.legend(fontsize=7)
        fig.tight_layout()
        return [self._save(fig, path)] + out


def get_writer(headless: bool = False) -> NullWriter:
    return NullWriter() if headless else FigureWriter()
