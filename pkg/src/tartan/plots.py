"""Weight-trajectory figures.

Every figure is rendered to a vector-graphics file with a sibling CSV that
contains exactly the plotted points; re-reading the CSV reproduces the plot.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .strategies import RunRecord


def _alpha_series(records: Sequence[RunRecord]) -> Tuple[List[int], List[str], np.ndarray]:
    """Per-task mean alpha across records, truncated to the shortest run."""
    if not records:
        raise ValueError("no records to plot")
    task_ids = records[0].task_ids
    for rec in records:
        if rec.task_ids != task_ids:
            raise ValueError("records disagree on task ids")
        if not rec.steps:
            raise ValueError("record has no logged steps")
    n_steps = min(len(rec.steps) for rec in records)
    steps = [row.step for row in records[0].steps[:n_steps]]
    values = np.zeros((len(task_ids), n_steps))
    for rec in records:
        for j in range(n_steps):
            for t, tid in enumerate(task_ids):
                values[t, j] += rec.steps[j].alpha[tid]
    values /= len(records)
    return steps, task_ids, values


def _smooth(series: np.ndarray, window: int) -> np.ndarray:
    kernel = np.ones(window) / window
    return np.convolve(series, kernel, mode="valid")


def render_trajectories(records: Sequence[RunRecord], output_path,
                        smooth_window: Optional[int] = None) -> Tuple[Path, Path]:
    """Line chart of each task's mixture weight over training steps.

    Returns (figure path, sibling CSV path). Rendering is pure drawing of
    logged data; if a smoothing window is given it is stated in the subtitle.
    """
    steps, task_ids, values = _alpha_series(records)
    if smooth_window is not None:
        if smooth_window < 1 or smooth_window > len(steps):
            raise ValueError("smoothing window out of range")
        values = np.stack([_smooth(values[t], smooth_window) for t in range(len(task_ids))])
        steps = steps[smooth_window - 1:]

    fig_path = Path(output_path)
    if fig_path.suffix.lower() not in (".svg", ".pdf"):
        fig_path = fig_path.with_suffix(".svg")
    csv_path = fig_path.with_suffix(".csv")
    fig_path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for t, tid in enumerate(task_ids):
        ax.plot(steps, values[t], label=f"alpha[{tid}]")
    ax.set_xlabel("training step")
    ax.set_ylabel("mixture weight")
    ax.set_ylim(0.0, 1.0)
    title = "Task mixture weights"
    if len(records) > 1:
        title += f" (mean of {len(records)} seeds)"
    ax.set_title(title)
    if smooth_window is not None:
        ax.text(0.5, 1.08, f"moving average, window {smooth_window}",
                transform=ax.transAxes, ha="center", fontsize=8)
    ax.legend()
    fig.tight_layout()
    fig.savefig(fig_path)
    plt.close(fig)

    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step"] + [f"alpha_{tid}" for tid in task_ids])
        for j, step in enumerate(steps):
            writer.writerow([str(step)] + [repr(float(values[t, j])) for t in range(len(task_ids))])
    return fig_path, csv_path
