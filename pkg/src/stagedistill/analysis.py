"""Logit correlation comparison and training-overhead accounting."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import ArrayDataset
from .errors import ReportingError
from .training import predict_logits, read_metrics

log = logging.getLogger(__name__)


def pearson_matrix(scores) -> np.ndarray:
    """Pearson correlation between the columns of an ``n x C`` score table.

    Columns with zero variance get a zero row/column and a unit diagonal.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 2:
        raise ReportingError("correlation needs an n x C table with n >= 2")
    centered = s - s.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    dead = norms == 0
    if dead.any():
        log.warning("zero-variance class columns %s; correlations set to 0", np.flatnonzero(dead).tolist())
    safe = np.where(dead, 1.0, norms)
    unit = centered / safe
    corr = unit.T @ unit
    corr[dead, :] = 0.0
    corr[:, dead] = 0.0
    corr = (corr + corr.T) / 2
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


@dataclass
class CorrelationReport:
    teacher_corr: np.ndarray
    student_corr: np.ndarray
    diff: np.ndarray
    diff_frobenius: float
    class_names: Sequence[str] = ()

    @classmethod
    def from_scores(cls, teacher_scores, student_scores, class_names=()) -> "CorrelationReport":
        t, s = pearson_matrix(teacher_scores), pearson_matrix(student_scores)
        if t.shape != s.shape:
            raise ReportingError("teacher and student label spaces differ")
        d = t - s
        return cls(t, s, d, float(np.linalg.norm(d)), tuple(class_names))

    def write_csv(self, path) -> Path:
        """Write the three matrices as one long-format grid: matrix,row,col,value."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["matrix,row,col,value"]
        for name, m in (("teacher", self.teacher_corr), ("student", self.student_corr), ("diff", self.diff)):
            for i in range(m.shape[0]):
                for j in range(m.shape[1]):
                    lines.append(f"{name},{i},{j},{m[i, j]:.17g}")
        path.write_text("\n".join(lines) + "\n")
        return path

    def plot(self, path) -> Path:
        """Render the difference matrix as a heatmap image."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(5, 4.2))
        lim = max(float(np.abs(self.diff).max()), 1e-12)
        im = ax.imshow(self.diff, cmap="RdBu_r", vmin=-lim, vmax=lim)
        ticks = range(self.diff.shape[0])
        labels = self.class_names or [str(i) for i in ticks]
        ax.set_xticks(list(ticks), labels, rotation=60, fontsize=7)
        ax.set_yticks(list(ticks), labels, fontsize=7)
        ax.set_title(f"teacher - student correlation (||D||_F = {self.diff_frobenius:.3f})", fontsize=9)
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path

    def to_dict(self) -> dict:
        return {
            "teacher_corr": self.teacher_corr.tolist(),
            "student_corr": self.student_corr.tolist(),
            "diff": self.diff.tolist(),
            "diff_frobenius": self.diff_frobenius,
        }


def _all_logits(model, data: ArrayDataset, batch_size: int = 512) -> np.ndarray:
    chunks = [predict_logits(model, x) for x, _ in data.batches(batch_size)]
    return torch.cat(chunks).double().numpy()


def correlation_report(teacher, student, data: ArrayDataset) -> CorrelationReport:
    """Compare class-logit correlation structure of two models over ``data``.

    Either model may be weights, a network, or anything with ``logits(x)``.
    """
    return CorrelationReport.from_scores(
        _all_logits(teacher, data), _all_logits(student, data), data.class_names
    )


def overhead_report(run_dir) -> dict:
    """Extra distillation parameters and mean training wall time per batch.

    Walks every ``rung.json`` / ``metrics.jsonl`` pair below ``run_dir``.
    ``time_per_batch`` is in milliseconds, averaged over all training
    batches of all runs found; ``extra_params`` sums the adapters of every
    run.
    """
    run_dir = Path(run_dir)
    rungs = sorted(run_dir.rglob("rung.json"))
    if not rungs:
        raise ReportingError(f"no completed runs under {run_dir}")
    extra, wall, batches = 0, 0.0, 0
    for rung in rungs:
        metrics = rung.parent / "metrics.jsonl"
        if not metrics.exists():
            raise ReportingError(f"missing metrics log {metrics}")
        extra += int(json.loads(rung.read_text())["extra_params"])
        for rec in read_metrics(metrics):
            if rec.get("split") == "train":
                wall += rec["wall_ms"]
                batches += rec["n_batches"]
    if batches == 0:
        raise ReportingError(f"no training epochs logged under {run_dir}")
    return {"extra_params": extra, "time_per_batch": wall / batches, "n_runs": len(rungs)}
