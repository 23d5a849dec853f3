"""Discrimination, calibration, and aggregate ranking metrics.

AUROC uses the rank-statistic (Mann-Whitney) formulation with half credit
for ties, so it agrees exactly with the all-pairs definition. Uncertainty
across the five repeated splits is a t-interval (t = 2.776 for 4 degrees of
freedom). Encoder ordering aggregates per-task ranks (Borda-style rank-sum,
lower is better).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import IncompleteCoverageError, ManifestParseError, UndefinedAurocError
from .formats import atomic_write

PREDICTION_COLUMNS = [
    "slide_id",
    "patient_id",
    "task_id",
    "split_index",
    "checkpoint_kind",
    "context",
    "probability",
    "label",
]
CONTEXTS = ("cv", "external")

T_CRITICAL_5_SPLITS = 2.776  # two-sided 95%, 4 degrees of freedom


@dataclass(frozen=True)
class PredictionRecord:
    slide_id: str
    patient_id: str
    task_id: str
    split_index: int
    checkpoint_kind: str
    context: str
    probability: float
    label: int

    def __post_init__(self):
        if not (0.0 <= self.probability <= 1.0) or not np.isfinite(self.probability):
            raise ManifestParseError(f"probability {self.probability!r} outside [0,1]")
        if self.label not in (0, 1):
            raise ManifestParseError(f"label must be 0 or 1, got {self.label!r}")
        if self.context not in CONTEXTS:
            raise ManifestParseError(f"unknown context {self.context!r}")


def _as_arrays(y_true, y_score) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(y_true, dtype=np.int64)
    scores = np.asarray(y_score, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels and scores must be 1-D arrays of equal length")
    return labels, scores


def auroc(y_true, y_score) -> float:
    """Probability a random positive outranks a random negative; ties get 0.5.

    Computed from mid-ranks: (R_pos - n_pos(n_pos+1)/2) / (n_pos * n_neg),
    which equals the all-pairs count exactly.
    """
    labels, scores = _as_arrays(y_true, y_score)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAurocError(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    avg_rank = cum - (counts - 1) / 2.0
    ranks = avg_rank[inverse]
    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _threshold_groups(labels: np.ndarray, scores: np.ndarray):
    """Cumulative (tp, predicted_positive) at each distinct score, descending."""
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    cum_tp = np.cumsum(sorted_labels)
    boundaries = np.nonzero(np.diff(sorted_scores))[0]
    ends = np.append(boundaries, len(scores) - 1)
    return [(float(sorted_scores[e]), int(cum_tp[e]), int(e + 1)) for e in ends]


def pr_curve(y_true, y_score) -> list[tuple[float, float]]:
    """(recall, precision) at each distinct threshold, descending threshold order."""
    labels, scores = _as_arrays(y_true, y_score)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedAurocError("precision-recall needs at least one positive")
    return [(tp / n_pos, tp / npp) for _, tp, npp in _threshold_groups(labels, scores)]


def roc_points(y_true, y_score) -> list[tuple[float, float]]:
    """(fpr, tpr) pairs from (0,0) to (1,1) at each distinct threshold."""
    labels, scores = _as_arrays(y_true, y_score)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAurocError("ROC needs both classes")
    points = [(0.0, 0.0)]
    for _, tp, npp in _threshold_groups(labels, scores):
        points.append(((npp - tp) / n_neg, tp / n_pos))
    return points


@dataclass(frozen=True)
class CalibrationBin:
    bin_lo: float
    bin_hi: float
    mean_predicted: float | None
    observed_rate: float | None
    count: int


def reliability_bins(y_true, y_prob, n_bins: int = 10) -> list[CalibrationBin]:
    """Equal-width reliability table on [0,1]; empty bins carry count 0."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    labels, probs = _as_arrays(y_true, y_prob)
    if probs.size and (probs.min() < 0 or probs.max() > 1):
        raise ValueError("probabilities must lie in [0,1]")
    indices = np.minimum((probs * n_bins).astype(int), n_bins - 1)
    bins = []
    for k in range(n_bins):
        members = indices == k
        count = int(members.sum())
        bins.append(
            CalibrationBin(
                bin_lo=k / n_bins,
                bin_hi=(k + 1) / n_bins,
                mean_predicted=float(probs[members].mean()) if count else None,
                observed_rate=float(labels[members].mean()) if count else None,
                count=count,
            )
        )
    return bins


@dataclass(frozen=True)
class SplitSummary:
    mean: float
    std: float
    ci_lo: float
    ci_hi: float


def split_summary(aurocs: Sequence[float]) -> SplitSummary:
    """Mean, sample std, and 95% t-interval over exactly five repeated splits."""
    values = np.asarray(aurocs, dtype=np.float64)
    if values.shape != (5,):
        raise ValueError(f"split summary is defined over exactly 5 values, got {values.shape}")
    mean = float(values.mean())
    std = float(values.std(ddof=1))
    half_width = T_CRITICAL_5_SPLITS * std / np.sqrt(5.0)
    return SplitSummary(mean=mean, std=std, ci_lo=mean - half_width, ci_hi=mean + half_width)


def delta_auroc(external_mean: float, internal_mean: float) -> float:
    """Signed generalization shift: external minus internal."""
    return external_mean - internal_mean


@dataclass(frozen=True)
class EncoderRank:
    encoder_id: str
    rank_sum: float
    mean_auroc: float


def borda_rank(table: Mapping[str, Mapping[str, float]]) -> list[EncoderRank]:
    """Rank encoders within each task (1 = best AUROC, ties share the mean rank)
    and sum ranks across tasks; lower rank-sum is better. Requires a value for
    every (task, encoder) cell."""
    if not table:
        raise IncompleteCoverageError("empty metric table")
    encoders = sorted({e for row in table.values() for e in row})
    for task_id, row in table.items():
        missing = [e for e in encoders if e not in row]
        if missing:
            raise IncompleteCoverageError(f"task {task_id} missing encoders: {', '.join(missing)}")

    rank_sums = {e: 0.0 for e in encoders}
    for row in table.values():
        for encoder in encoders:
            value = row[encoder]
            better = sum(1 for other in encoders if row[other] > value)
            equal = sum(1 for other in encoders if row[other] == value)
            rank_sums[encoder] += better + (equal + 1) / 2.0
    return sorted(
        (
            EncoderRank(
                encoder_id=e,
                rank_sum=rank_sums[e],
                mean_auroc=float(np.mean([table[t][e] for t in table])),
            )
            for e in encoders
        ),
        key=lambda r: (r.rank_sum, r.encoder_id),
    )


def top_k_tasks(table: Mapping[str, Mapping[object, float]], k: int = 8) -> list[str]:
    """Tasks ordered by median AUROC pooled over their (encoder, context) cells.

    Ties break lexicographically by task id. All tasks must cover the same
    cell set (complete coverage).
    """
    if k > len(table):
        raise ValueError(f"k={k} exceeds task count {len(table)}")
    cell_sets = {frozenset(row.keys()) for row in table.values()}
    if len(cell_sets) > 1:
        raise IncompleteCoverageError("tasks do not share a common (encoder, context) cell set")
    medians = {task: float(np.median(list(row.values()))) for task, row in table.items()}
    ordered = sorted(table, key=lambda t: (-medians[t], t))
    return ordered[:k]


# ---------------------------------------------------------------------------
# predictions CSV

def write_predictions_csv(records: Iterable[PredictionRecord], path: Path | str) -> None:
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.slide_id,
                    r.patient_id,
                    r.task_id,
                    r.split_index,
                    r.checkpoint_kind,
                    r.context,
                    repr(r.probability),
                    r.label,
                ]
            )


def read_predictions_csv(path: Path | str) -> list[PredictionRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PREDICTION_COLUMNS:
            raise ManifestParseError(f"{path}: bad prediction CSV columns {header!r}")
        for raw in reader:
            slide_id, patient_id, task_id, split_index, kind, context, prob, label = raw
            records.append(
                PredictionRecord(
                    slide_id=slide_id,
                    patient_id=patient_id,
                    task_id=task_id,
                    split_index=int(split_index),
                    checkpoint_kind=kind,
                    context=context,
                    probability=float(prob),
                    label=int(label),
                )
            )
    return records


# ---------------------------------------------------------------------------
# report assembly

@dataclass
class CellMetrics:
    """Metrics for one (task, encoder, context, checkpoint_kind) cell."""

    task_id: str
    encoder_id: str
    context: str
    checkpoint_kind: str
    aurocs_by_split: dict[int, float]
    summary: SplitSummary | None
    calibration: list[CalibrationBin]
    roc: list[tuple[float, float]]
    pr: list[tuple[float, float]]

    @property
    def mean_auroc(self) -> float:
        return float(np.mean(list(self.aurocs_by_split.values())))


@dataclass
class MetricReport:
    task_id: str
    encoder_id: str
    cells: list[CellMetrics] = field(default_factory=list)

    def cell(self, context: str, checkpoint_kind: str) -> CellMetrics | None:
        for c in self.cells:
            if c.context == context and c.checkpoint_kind == checkpoint_kind:
                return c
        return None

    def checkpoint_selection_deltas(self, context: str) -> dict[int, float]:
        """Per-split AUROC gain of the best-AUC checkpoint over the final epoch."""
        best = self.cell(context, "best_auc")
        final = self.cell(context, "final_epoch")
        if best is None or final is None:
            return {}
        shared = sorted(set(best.aurocs_by_split) & set(final.aurocs_by_split))
        return {k: best.aurocs_by_split[k] - final.aurocs_by_split[k] for k in shared}


def build_metric_report(
    records: Sequence[PredictionRecord], task_id: str, encoder_id: str, n_bins: int = 10
) -> MetricReport:
    """Group predictions into cells and compute the per-cell metric battery."""
    report = MetricReport(task_id=task_id, encoder_id=encoder_id)
    records = [r for r in records if r.task_id == task_id]
    cells = sorted({(r.context, r.checkpoint_kind) for r in records})
    for context, kind in cells:
        subset = [r for r in records if r.context == context and r.checkpoint_kind == kind]
        aurocs_by_split = {}
        for split_index in sorted({r.split_index for r in subset}):
            rows = [r for r in subset if r.split_index == split_index]
            aurocs_by_split[split_index] = auroc(
                [r.label for r in rows], [r.probability for r in rows]
            )
        labels = [r.label for r in subset]
        probs = [r.probability for r in subset]
        values = list(aurocs_by_split.values())
        report.cells.append(
            CellMetrics(
                task_id=task_id,
                encoder_id=encoder_id,
                context=context,
                checkpoint_kind=kind,
                aurocs_by_split=aurocs_by_split,
                summary=split_summary(values) if len(values) == 5 else None,
                calibration=reliability_bins(labels, probs, n_bins=n_bins),
                roc=roc_points(labels, probs),
                pr=pr_curve(labels, probs),
            )
        )
    return report


METRICS_COLUMNS = [
    "task_id",
    "encoder_id",
    "context",
    "checkpoint_kind",
    "split_index",
    "auroc",
    "std",
    "ci_lo",
    "ci_hi",
]
CALIBRATION_COLUMNS = [
    "task_id",
    "encoder_id",
    "context",
    "checkpoint_kind",
    "bin_lo",
    "bin_hi",
    "mean_predicted",
    "observed_rate",
    "count",
]
RANK_TABLE_COLUMNS = ["context", "checkpoint_kind", "encoder_id", "rank_sum", "mean_auroc"]
DELTA_COLUMNS = ["task_id", "encoder_id", "context", "split_index", "delta_best_minus_final"]


def write_metrics_csv(reports: Iterable[MetricReport], path: Path | str) -> None:
    """Per-split AUROC rows plus a summary row (split_index = ``mean``) per cell."""
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for report in reports:
            for cell in report.cells:
                base = [cell.task_id, cell.encoder_id, cell.context, cell.checkpoint_kind]
                for split_index, value in sorted(cell.aurocs_by_split.items()):
                    writer.writerow(base + [split_index, repr(value), "", "", ""])
                if cell.summary is not None:
                    s = cell.summary
                    writer.writerow(
                        base + ["mean", repr(s.mean), repr(s.std), repr(s.ci_lo), repr(s.ci_hi)]
                    )


def write_calibration_csv(reports: Iterable[MetricReport], path: Path | str) -> None:
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(CALIBRATION_COLUMNS)
        for report in reports:
            for cell in report.cells:
                for b in cell.calibration:
                    writer.writerow(
                        [
                            cell.task_id,
                            cell.encoder_id,
                            cell.context,
                            cell.checkpoint_kind,
                            repr(b.bin_lo),
                            repr(b.bin_hi),
                            "" if b.mean_predicted is None else repr(b.mean_predicted),
                            "" if b.observed_rate is None else repr(b.observed_rate),
                            b.count,
                        ]
                    )


def write_delta_csv(reports: Iterable[MetricReport], path: Path | str) -> None:
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(DELTA_COLUMNS)
        for report in reports:
            for context in CONTEXTS:
                deltas = report.checkpoint_selection_deltas(context)
                for split_index, delta in sorted(deltas.items()):
                    writer.writerow(
                        [report.task_id, report.encoder_id, context, split_index, repr(delta)]
                    )
                if deltas:
                    mean = float(np.mean(list(deltas.values())))
                    writer.writerow([report.task_id, report.encoder_id, context, "mean", repr(mean)])


def write_rank_table_csv(
    ranks_by_cell: Mapping[tuple[str, str], Sequence[EncoderRank]], path: Path | str
) -> None:
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(RANK_TABLE_COLUMNS)
        for (context, kind), ranks in sorted(ranks_by_cell.items()):
            for r in ranks:
                writer.writerow([context, kind, r.encoder_id, repr(r.rank_sum), repr(r.mean_auroc)])


def plots_payload(report: MetricReport) -> dict:
    """Plot-ready ROC/PR/calibration point lists for one (task, encoder)."""
    return {
        "format_version": "1",
        "task_id": report.task_id,
        "encoder_id": report.encoder_id,
        "cells": [
            {
                "context": cell.context,
                "checkpoint_kind": cell.checkpoint_kind,
                "auroc_per_split": {str(k): v for k, v in sorted(cell.aurocs_by_split.items())},
                "mean_auroc": cell.mean_auroc,
                "summary": None
                if cell.summary is None
                else {
                    "mean": cell.summary.mean,
                    "std": cell.summary.std,
                    "ci_lo": cell.summary.ci_lo,
                    "ci_hi": cell.summary.ci_hi,
                },
                "roc": [[x, y] for x, y in cell.roc],
                "pr": [[x, y] for x, y in cell.pr],
                "calibration": [
                    {
                        "bin_lo": b.bin_lo,
                        "bin_hi": b.bin_hi,
                        "mean_predicted": b.mean_predicted,
                        "observed_rate": b.observed_rate,
                        "count": b.count,
                    }
                    for b in cell.calibration
                ],
            }
            for cell in report.cells
        ],
    }


def write_plots_json(report: MetricReport, path: Path | str) -> None:
    with atomic_write(path, "w") as fh:
        json.dump(plots_payload(report), fh, indent=2, allow_nan=False)
        fh.write("\n")
