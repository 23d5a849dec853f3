"""Task definition and versioned stratified patient-level splits.

Labels arrive as a manifest (binary per tumor-gene task); tasks are kept when
they have at least ``min_positives`` positive patients. Splitting is at the
patient level: a patient is positive if any of their slides is positive, all
of a patient's slides land on the same side, and each of the repeated splits
is an independent seeded reshuffle with per-class 70/30 stratification.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import UnknownSlideError, UnsplittableTaskError
from .formats import LabelManifest, SlideRecord, SplitManifest

MIN_POSITIVES_DEFAULT = 15


@dataclass(frozen=True)
class TaskDefinition:
    task_id: str
    cohort_id: str
    n_total: int
    n_positive: int
    n_negative: int
    included: bool


def patient_labels(labels: LabelManifest, task_id: str, patients: Iterable[str] | None = None) -> dict[str, int]:
    """Patient-level labels for one task: positive if any slide is positive."""
    out: dict[str, int] = {}
    for row in labels.rows_for_task(task_id):
        if patients is not None and row.patient_id not in patients:
            continue
        out[row.patient_id] = max(out.get(row.patient_id, 0), row.label)
    return out


def define_tasks(
    labels: LabelManifest,
    slides: Iterable[SlideRecord],
    min_positives: int = MIN_POSITIVES_DEFAULT,
    eligible_slides: Iterable[str] | None = None,
) -> list[TaskDefinition]:
    """One TaskDefinition per distinct task, counted over eligible patients.

    A label row pointing at a slide outside the cohort is a hard error
    (fail-closed). ``eligible_slides`` is the QC-passing subset (defaults to
    all slides); patients count toward a task only while they keep at least
    one eligible slide.
    """
    by_slide: dict[str, SlideRecord] = {s.slide_id: s for s in slides}
    unknown = sorted({r.slide_id for r in labels.rows if r.slide_id not in by_slide})
    if unknown:
        raise UnknownSlideError(f"label rows reference unknown slides: {', '.join(unknown)}")
    eligible = set(eligible_slides) if eligible_slides is not None else set(by_slide)

    patients_with_slides: dict[str, set[str]] = defaultdict(set)
    for record in by_slide.values():
        if record.slide_id in eligible:
            patients_with_slides[record.patient_id].add(record.slide_id)

    tasks = []
    for task_id in labels.task_ids():
        per_patient = patient_labels(labels, task_id, patients=patients_with_slides.keys())
        cohorts = sorted(
            {by_slide[r.slide_id].cohort_id for r in labels.rows_for_task(task_id)}
        )
        n_positive = sum(per_patient.values())
        n_total = len(per_patient)
        tasks.append(
            TaskDefinition(
                task_id=task_id,
                cohort_id="+".join(cohorts),
                n_total=n_total,
                n_positive=n_positive,
                n_negative=n_total - n_positive,
                included=n_positive >= min_positives,
            )
        )
    return tasks


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def make_splits(
    task: TaskDefinition,
    labels: LabelManifest,
    seed: int,
    n_splits: int = 5,
    train_frac: float = 0.7,
) -> SplitManifest:
    """Repeated stratified patient-level partitions for one included task.

    Each split is an independent reshuffle: per label class, a seeded
    permutation sends round(train_frac * class size) patients to train and
    the rest to test. Determinism: the same (seed, split index) always yields
    the same assignment.
    """
    if not task.included:
        raise ValueError(f"task {task.task_id} is excluded; splits are only made for included tasks")
    per_patient = patient_labels(labels, task.task_id)
    by_class: dict[int, list[str]] = {0: [], 1: []}
    for patient in sorted(per_patient):
        by_class[per_patient[patient]].append(patient)
    for cls, members in by_class.items():
        if len(members) < 2:
            raise UnsplittableTaskError(
                f"task {task.task_id}: class {cls} has {len(members)} patient(s); need >= 2"
            )

    splits: list[dict[str, str]] = []
    for split_index in range(n_splits):
        rng = np.random.default_rng([seed, split_index])
        assignment: dict[str, str] = {}
        for cls in (0, 1):
            members = by_class[cls]
            order = rng.permutation(len(members))
            n_train = _round_half_up(train_frac * len(members))
            for pos, member_index in enumerate(order):
                assignment[members[member_index]] = "train" if pos < n_train else "test"
        splits.append(assignment)
    return SplitManifest(task_id=task.task_id, seed=seed, splits=splits)


def slide_sides(
    split: Mapping[str, str], slide_to_patient: Mapping[str, str]
) -> dict[str, str]:
    """Expand a patient-level assignment to slides; patient-level by construction."""
    return {
        slide_id: split[patient]
        for slide_id, patient in slide_to_patient.items()
        if patient in split
    }
