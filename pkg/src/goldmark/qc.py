"""Integrity checks: cardinality, checksums, degeneracy flags, fail-closed gating.

The cardinality audit compares the tile manifest row count against the
embedding header's tile count without touching the payload (O(1) per slide).
Artifacts must also be structurally whole (no truncation), carry a digest
that verifies, and show non-degenerate content. Failing artifacts can be
renamed with a ``.FAILED`` suffix; slides missing entirely abort the run.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embed import LOW_VARIANCE_REL_THRESHOLD, compute_metadata, is_low_variance
from .errors import (
    ChecksumMismatchError,
    FormatError,
    InsufficientSharedSlidesError,
    ManifestParseError,
    MissingArtifactError,
    UndefinedCorrelationError,
)
from .formats import (
    EmbHeader,
    FAILED_SUFFIX,
    TileManifest,
    atomic_write,
    mark_failed,
    meta_path_for,
    read_artifact,
    read_emb_header,
    read_metadata_json,
)

QC_REPORT_COLUMNS = [
    "slide_id",
    "encoder_id",
    "cardinality_ok",
    "checksum_ok",
    "variance_flag",
    "status",
    "reason",
]


def check_cardinality(manifest: TileManifest, header: EmbHeader) -> bool:
    """True iff the artifact's stored tile count equals the manifest row count."""
    return header.n_tiles == len(manifest.rows)


@dataclass(frozen=True)
class QcRow:
    slide_id: str
    encoder_id: str
    cardinality_ok: bool
    checksum_ok: bool
    variance_flag: bool
    status: str
    reason: str = ""


@dataclass
class QcReport:
    rows: list[QcRow] = field(default_factory=list)

    @property
    def n_pass(self) -> int:
        return sum(1 for r in self.rows if r.status == "pass")

    @property
    def n_fail(self) -> int:
        return len(self.rows) - self.n_pass

    @property
    def pass_rate(self) -> float:
        return self.n_pass / len(self.rows) if self.rows else 0.0

    def row_for(self, slide_id: str, encoder_id: str) -> QcRow | None:
        for r in self.rows:
            if r.slide_id == slide_id and r.encoder_id == encoder_id:
                return r
        return None

    def passing_slides(self, encoder_id: str | None = None) -> set[str]:
        return {
            r.slide_id
            for r in self.rows
            if r.status == "pass" and (encoder_id is None or r.encoder_id == encoder_id)
        }


def _resolve_artifact_path(emb_path: Path) -> Path | None:
    """Return the live path, or the previously-failed one, or None if absent."""
    if emb_path.exists():
        return emb_path
    failed = emb_path.with_name(emb_path.name + FAILED_SUFFIX)
    if failed.exists():
        return failed
    return None


def audit_slide(
    manifest: TileManifest,
    emb_path: Path | str,
    encoder_id: str | None = None,
    low_variance_rel: float = LOW_VARIANCE_REL_THRESHOLD,
) -> QcRow:
    """Run the full check battery for one (slide, encoder) artifact.

    Check order fixes the reported status: structural truncation or a tile
    count disagreeing with the manifest -> failed_cardinality (partial
    extraction / mismatched manifest); digest failure -> failed_checksum;
    degenerate content (low variance or NaN/Inf) -> flagged_low_variance.
    """
    emb_path = Path(emb_path)
    resolved = _resolve_artifact_path(emb_path)
    if resolved is None:
        raise MissingArtifactError([manifest.slide_id])

    def fail(status: str, reason: str, cardinality_ok=False, checksum_ok=False, variance_flag=False):
        return QcRow(
            slide_id=manifest.slide_id,
            encoder_id=encoder_id or "",
            cardinality_ok=cardinality_ok,
            checksum_ok=checksum_ok,
            variance_flag=variance_flag,
            status=status,
            reason=reason,
        )

    try:
        header = read_emb_header(resolved)
    except FormatError as exc:
        return fail("failed_cardinality", f"unreadable header: {exc}")
    if encoder_id is None:
        encoder_id = header.encoder_id

    cardinality_ok = check_cardinality(manifest, header)
    size = os.stat(resolved).st_size
    if size < header.expected_file_bytes:
        return fail("failed_cardinality", "truncated payload (partial feature extraction)")
    if not cardinality_ok:
        return fail(
            "failed_cardinality",
            f"header has {header.n_tiles} tiles, manifest lists {len(manifest.rows)}",
        )

    try:
        artifact = read_artifact(resolved, verify=True)
    except ChecksumMismatchError:
        return fail("failed_checksum", "payload digest mismatch", cardinality_ok=True)
    except FormatError as exc:
        return fail("failed_checksum", f"unreadable artifact: {exc}", cardinality_ok=True)

    # sidecar stats when available and matching; recompute otherwise
    meta = None
    meta_src = meta_path_for(emb_path)
    resolved_meta = _resolve_artifact_path(meta_src) if meta_src else None
    if resolved_meta is not None:
        try:
            candidate = read_metadata_json(resolved_meta)
            if candidate.checksum == artifact.checksum:
                meta = candidate
        except FormatError:
            meta = None
    if meta is None:
        meta = compute_metadata(artifact, low_variance_rel=low_variance_rel)

    degenerate = (
        meta.nan_fraction > 0
        or meta.inf_fraction > 0
        or is_low_variance(
            meta.embedding_variance,
            _mean_sq_norm_estimate(artifact.tensor),
            low_variance_rel,
        )
    )
    if degenerate:
        reasons = []
        if meta.nan_fraction > 0 or meta.inf_fraction > 0:
            reasons.append("non-finite values")
        else:
            reasons.append("near-constant embedding rows")
        return fail(
            "flagged_low_variance",
            "; ".join(reasons),
            cardinality_ok=True,
            checksum_ok=True,
            variance_flag=True,
        )
    return QcRow(
        slide_id=manifest.slide_id,
        encoder_id=encoder_id,
        cardinality_ok=True,
        checksum_ok=True,
        variance_flag=False,
        status="pass",
    )


def _mean_sq_norm_estimate(tensor: np.ndarray) -> float:
    x = tensor.astype(np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        return float(np.mean(np.sum(x * x, axis=1)))


def audit_cohort(
    pairs: Iterable[tuple[TileManifest, Path | str]],
    encoder_id: str | None = None,
    low_variance_rel: float = LOW_VARIANCE_REL_THRESHOLD,
) -> QcReport:
    """Audit (manifest, artifact path) pairs; read-only, hence idempotent."""
    report = QcReport()
    for manifest, emb_path in pairs:
        report.rows.append(audit_slide(manifest, emb_path, encoder_id, low_variance_rel))
    report.rows.sort(key=lambda r: (r.slide_id, r.encoder_id))
    return report


def mark_report_failures(report: QcReport, emb_path_for: Mapping[str, Path]) -> list[Path]:
    """Rename artifacts behind failing rows with the failure suffix."""
    renamed = []
    for row in report.rows:
        if row.status.startswith("failed") and row.slide_id in emb_path_for:
            path = Path(emb_path_for[row.slide_id])
            if path.exists():
                renamed.append(mark_failed(path))
    return renamed


def write_qc_csv(report: QcReport, path: Path | str) -> None:
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(QC_REPORT_COLUMNS)
        for r in report.rows:
            writer.writerow(
                [
                    r.slide_id,
                    r.encoder_id,
                    int(r.cardinality_ok),
                    int(r.checksum_ok),
                    int(r.variance_flag),
                    r.status,
                    r.reason,
                ]
            )


def read_qc_csv(path: Path | str) -> QcReport:
    report = QcReport()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != QC_REPORT_COLUMNS:
            raise ManifestParseError(f"{path}: bad QC report columns {header!r}")
        for raw in reader:
            slide_id, encoder_id, card, chk, var, status, reason = raw
            report.rows.append(
                QcRow(
                    slide_id=slide_id,
                    encoder_id=encoder_id,
                    cardinality_ok=bool(int(card)),
                    checksum_ok=bool(int(chk)),
                    variance_flag=bool(int(var)),
                    status=status,
                    reason=reason,
                )
            )
    return report


# ---------------------------------------------------------------------------
# run manifests (fail-closed gate in front of training/inference)

@dataclass
class RunManifest:
    task_id: str
    encoder_id: str
    split_seed: int
    slides: list[str]
    exclusions: dict[str, str] = field(default_factory=dict)


def build_run_manifest(
    task_id: str,
    encoder_id: str,
    split_seed: int,
    labeled_slides: Sequence[str],
    report: QcReport,
) -> RunManifest:
    """Gate a (task, encoder) run on QC: pass slides in, failures listed, gaps fatal.

    Every labeled slide must have a QC row; a slide with no audited artifact
    at all refuses the whole run (fail-closed).
    """
    audited = {r.slide_id: r for r in report.rows if r.encoder_id == encoder_id or r.encoder_id == ""}
    missing = [s for s in labeled_slides if s not in audited]
    if missing:
        raise MissingArtifactError(missing)
    slides = []
    exclusions = {}
    for slide_id in sorted(labeled_slides):
        row = audited[slide_id]
        if row.status == "pass":
            slides.append(slide_id)
        else:
            exclusions[slide_id] = f"{row.status}: {row.reason}" if row.reason else row.status
    return RunManifest(
        task_id=task_id,
        encoder_id=encoder_id,
        split_seed=split_seed,
        slides=slides,
        exclusions=exclusions,
    )


# ---------------------------------------------------------------------------
# cross-encoder variance correlation

def variance_correlation(
    variances_by_encoder: Mapping[str, Mapping[str, float]],
) -> tuple[list[str], np.ndarray]:
    """Pearson r of per-slide embedding variance between every encoder pair.

    Computed over the slides shared by all encoders (complete coverage);
    needs at least three shared slides, and any constant vector makes the
    correlation undefined for its pairs.
    """
    encoders = sorted(variances_by_encoder)
    if len(encoders) < 2:
        raise InsufficientSharedSlidesError("need at least two encoders to correlate")
    shared = set.intersection(*(set(v) for v in variances_by_encoder.values()))
    if len(shared) < 3:
        raise InsufficientSharedSlidesError(
            f"only {len(shared)} slides shared across encoders; need >= 3"
        )
    slide_order = sorted(shared)
    vectors = {
        e: np.array([variances_by_encoder[e][s] for s in slide_order], dtype=np.float64)
        for e in encoders
    }
    for e, vec in vectors.items():
        if np.allclose(vec, vec[0]):
            raise UndefinedCorrelationError(f"encoder {e} has a constant variance vector")
    n = len(encoders)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            a = vectors[encoders[i]] - vectors[encoders[i]].mean()
            b = vectors[encoders[j]] - vectors[encoders[j]].mean()
            r = float(a @ b / np.sqrt((a @ a) * (b @ b)))
            matrix[i, j] = matrix[j, i] = r
    return encoders, matrix


def variance_correlation_from_metadata(
    metadata_by_encoder: Mapping[str, Iterable],
) -> tuple[list[str], np.ndarray]:
    """Convenience wrapper over EmbeddingMetadata collections."""
    table = {
        encoder: {m.slide_id: m.embedding_variance for m in metas}
        for encoder, metas in metadata_by_encoder.items()
    }
    return variance_correlation(table)
