"""Intermediate artifact formats: schemas, (de)serialization, checksums.

Every stage of the pipeline exchanges data exclusively through the formats
defined here:

* tile manifest CSV (``slide_id,tile_index,x,y,tile_px,mpp,fraction_tissue``)
* embedding artifact ``.emb`` (binary, self-describing header, SHA-256 trailer)
* embedding metadata sidecar ``.emb.meta.json``
* label manifest CSV
* split manifest CSV (``manifest_version,task_id,split_index,patient_id,assignment``)

Writers are atomic (temp file + rename); a crash mid-write never leaves a
readable file at the final path. See ``docs/formats.md`` for byte-level and
column-level documentation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import re
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    FormatError,
    InvalidRecordError,
    ManifestParseError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)

EMB_MAGIC = b"GMEMB\x00"
EMB_VERSION = 1
EMB_HEADER_ALIGN = 64
EMB_DIGEST_BYTES = 32
EMB_SUFFIX = ".emb"
META_SUFFIX = ".emb.meta.json"
FAILED_SUFFIX = ".FAILED"

TILE_MANIFEST_COLUMNS = ["slide_id", "tile_index", "x", "y", "tile_px", "mpp", "fraction_tissue"]
LABEL_MANIFEST_COLUMNS = ["format_version", "patient_id", "slide_id", "task_id", "label", "evidence_level"]
SPLIT_MANIFEST_COLUMNS = ["manifest_version", "task_id", "split_index", "patient_id", "assignment"]

LABEL_FORMAT_VERSION = "1"
SPLIT_VERSION_PATTERN = re.compile(r"^splits-v1-seed(-?\d+)$")

PREPARATIONS = ("FFPE", "frozen", "other")
STAINS = ("HE", "other")
EVIDENCE_LEVELS = ("L1", "L2", "L3", "other")
QC_STATUSES = ("pass", "flagged_low_variance", "failed_cardinality", "failed_checksum")


# ---------------------------------------------------------------------------
# checksums and atomic writes

def sha256_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def sha256_file(path: Path | str, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def atomic_write(path: Path | str, mode: str = "wb") -> Iterator:
    """Write to a temp file in the target directory, then rename into place.

    If the body raises (or the process dies before the rename), no file is
    visible at the final path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        if "b" in mode:
            fh = os.fdopen(fd, mode)
        else:
            fh = os.fdopen(fd, mode, encoding="utf-8", newline="")
        with fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def mark_failed(path: Path | str) -> Path:
    """Rename an artifact (and its sidecar, if any) with the failure suffix."""
    path = Path(path)
    failed = path.with_name(path.name + FAILED_SUFFIX)
    os.replace(path, failed)
    if path.name.endswith(EMB_SUFFIX):
        sidecar = meta_path_for(path)
        if sidecar.exists():
            os.replace(sidecar, sidecar.with_name(sidecar.name + FAILED_SUFFIX))
    return failed


def meta_path_for(emb_path: Path | str) -> Path:
    emb_path = Path(emb_path)
    if not emb_path.name.endswith(EMB_SUFFIX):
        raise ValueError(f"not an embedding path: {emb_path}")
    return emb_path.with_name(emb_path.name[: -len(EMB_SUFFIX)] + META_SUFFIX)


# ---------------------------------------------------------------------------
# slide records

@dataclass(frozen=True)
class SlideRecord:
    """One scanned slide: identity, physical resolution, raster location."""

    slide_id: str
    patient_id: str
    cohort_id: str
    mpp: float
    width_px: int
    height_px: int
    source_path: Path
    preparation: str = "FFPE"
    stain: str = "HE"

    def __post_init__(self):
        if not self.slide_id:
            raise InvalidRecordError("slide_id must be nonempty")
        if not (0 < self.mpp < 10):
            raise InvalidRecordError(f"implausible mpp {self.mpp!r} for slide {self.slide_id}")
        if self.width_px < 1 or self.height_px < 1:
            raise InvalidRecordError(f"slide {self.slide_id} has degenerate dimensions")
        if self.preparation not in PREPARATIONS:
            raise InvalidRecordError(f"unknown preparation {self.preparation!r}")
        if self.stain not in STAINS:
            raise InvalidRecordError(f"unknown stain {self.stain!r}")


def res_sidecar_path(raster_path: Path | str) -> Path:
    raster_path = Path(raster_path)
    return raster_path.with_name(raster_path.stem + ".res.json")


def write_res_sidecar(record: SlideRecord, path: Path | str | None = None) -> Path:
    """Persist the resolution/identity sidecar next to the raster."""
    path = Path(path) if path is not None else res_sidecar_path(record.source_path)
    payload = {
        "format_version": "1",
        "slide_id": record.slide_id,
        "patient_id": record.patient_id,
        "cohort_id": record.cohort_id,
        "mpp": record.mpp,
        "preparation": record.preparation,
        "stain": record.stain,
    }
    with atomic_write(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return path


def load_slide_record(raster_path: Path | str) -> SlideRecord:
    """Build a SlideRecord from a raster image plus its ``.res.json`` sidecar."""
    from PIL import Image

    raster_path = Path(raster_path)
    sidecar = res_sidecar_path(raster_path)
    if not sidecar.exists():
        raise InvalidRecordError(f"missing resolution sidecar for {raster_path.name}")
    meta = json.loads(sidecar.read_text())
    with Image.open(raster_path) as img:
        width, height = img.size
    return SlideRecord(
        slide_id=meta["slide_id"],
        patient_id=meta["patient_id"],
        cohort_id=meta["cohort_id"],
        mpp=float(meta["mpp"]),
        width_px=width,
        height_px=height,
        source_path=raster_path,
        preparation=meta.get("preparation", "FFPE"),
        stain=meta.get("stain", "HE"),
    )


def discover_slides(slides_dir: Path | str) -> list[SlideRecord]:
    """Load every raster with a sidecar under a directory, sorted by slide_id."""
    slides_dir = Path(slides_dir)
    records = []
    for raster in sorted(slides_dir.iterdir()):
        if raster.suffix.lower() not in (".png", ".tif", ".tiff"):
            continue
        records.append(load_slide_record(raster))
    return sorted(records, key=lambda r: r.slide_id)


# ---------------------------------------------------------------------------
# tile manifests

@dataclass(frozen=True)
class TileRow:
    index: int
    x: int
    y: int
    fraction_tissue: float


@dataclass
class TileManifest:
    """Ordered per-slide record of accepted tiles; the sampling contract."""

    slide_id: str
    mpp: float
    tile_px: int
    rows: list[TileRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def validate(self, width_px: int | None = None, height_px: int | None = None) -> None:
        for i, row in enumerate(self.rows):
            if row.index != i:
                raise ManifestParseError(
                    f"{self.slide_id}: tile indices not contiguous at position {i} (got {row.index})"
                )
            if not (0.0 <= row.fraction_tissue <= 1.0):
                raise ManifestParseError(
                    f"{self.slide_id}: fraction_tissue {row.fraction_tissue} outside [0,1]"
                )
            if row.x < 0 or row.y < 0:
                raise ManifestParseError(f"{self.slide_id}: negative tile coordinate at index {i}")
            if width_px is not None and row.x + self.tile_px > width_px:
                raise ManifestParseError(f"{self.slide_id}: tile {i} exceeds slide width")
            if height_px is not None and row.y + self.tile_px > height_px:
                raise ManifestParseError(f"{self.slide_id}: tile {i} exceeds slide height")
        order = [(r.y, r.x) for r in self.rows]
        if order != sorted(order):
            raise ManifestParseError(f"{self.slide_id}: rows not in row-major (y, x) order")


def write_manifest_csv(manifest: TileManifest, path: Path | str) -> None:
    manifest.validate()
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(TILE_MANIFEST_COLUMNS)
        for row in manifest.rows:
            writer.writerow(
                [
                    manifest.slide_id,
                    row.index,
                    row.x,
                    row.y,
                    manifest.tile_px,
                    repr(float(manifest.mpp)),
                    repr(float(row.fraction_tissue)),
                ]
            )


def _parse_int(value: str, what: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ManifestParseError(f"non-integer {what}: {value!r}") from None


def read_manifest_csv(path: Path | str) -> TileManifest:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestParseError(f"{path}: empty manifest file") from None
        if header != TILE_MANIFEST_COLUMNS:
            raise ManifestParseError(
                f"{path}: bad column set {header!r}, expected {TILE_MANIFEST_COLUMNS!r}"
            )
        slide_id = None
        mpp = None
        tile_px = None
        rows: list[TileRow] = []
        for raw in reader:
            if len(raw) != len(TILE_MANIFEST_COLUMNS):
                raise ManifestParseError(f"{path}: row has {len(raw)} fields")
            sid, idx, x, y, tpx, m, frac = raw
            if slide_id is None:
                slide_id, mpp, tile_px = sid, float(m), _parse_int(tpx, "tile_px")
            elif sid != slide_id or float(m) != mpp or _parse_int(tpx, "tile_px") != tile_px:
                raise ManifestParseError(f"{path}: inconsistent slide_id/mpp/tile_px across rows")
            frac_val = float(frac)
            if not (0.0 <= frac_val <= 1.0):
                raise ManifestParseError(f"{path}: fraction_tissue {frac} outside [0,1]")
            rows.append(
                TileRow(
                    index=_parse_int(idx, "tile_index"),
                    x=_parse_int(x, "x"),
                    y=_parse_int(y, "y"),
                    fraction_tissue=frac_val,
                )
            )
    if slide_id is None:
        raise ManifestParseError(f"{path}: manifest has no rows")
    manifest = TileManifest(slide_id=slide_id, mpp=mpp, tile_px=tile_px, rows=rows)
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# embedding artifacts (.emb)

@dataclass(frozen=True)
class EmbHeader:
    """Parsed self-describing header; enough for cardinality checks."""

    slide_id: str
    encoder_id: str
    encoder_version: str
    n_tiles: int
    dim: int
    header_size: int

    @property
    def payload_bytes(self) -> int:
        return self.n_tiles * self.dim * 4

    @property
    def expected_file_bytes(self) -> int:
        return self.header_size + self.payload_bytes + EMB_DIGEST_BYTES


@dataclass
class EmbeddingArtifact:
    """Per-slide feature tensor (tiles x dims) with provenance identity."""

    slide_id: str
    encoder_id: str
    encoder_version: str
    tensor: np.ndarray
    checksum: str | None = None

    @property
    def n_tiles(self) -> int:
        return int(self.tensor.shape[0])

    @property
    def dim(self) -> int:
        return int(self.tensor.shape[1])

    def validate(self) -> None:
        if self.tensor.ndim != 2:
            raise InvalidRecordError(f"tensor must be 2-D, got shape {self.tensor.shape}")
        if self.tensor.shape[1] < 1:
            raise InvalidRecordError("embedding dimension must be >= 1")
        if self.tensor.dtype != np.float32:
            raise InvalidRecordError(f"tensor dtype must be float32, got {self.tensor.dtype}")


def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError("string field too long for header")
    return struct.pack("<H", len(raw)) + raw


def encode_emb_header(artifact: EmbeddingArtifact) -> bytes:
    strings = (
        _pack_str(artifact.slide_id)
        + _pack_str(artifact.encoder_id)
        + _pack_str(artifact.encoder_version)
    )
    body_size = 24 + len(strings)
    header_size = int(math.ceil(body_size / EMB_HEADER_ALIGN) * EMB_HEADER_ALIGN)
    fixed = EMB_MAGIC + struct.pack(
        "<HQII", EMB_VERSION, artifact.n_tiles, artifact.dim, header_size
    )
    return fixed + strings + b"\x00" * (header_size - body_size)


def canonical_emb_bytes(artifact: EmbeddingArtifact) -> tuple[bytes, bytes]:
    """Header and payload bytes exactly as written to disk (digest excluded)."""
    artifact.validate()
    header = encode_emb_header(artifact)
    payload = np.ascontiguousarray(artifact.tensor, dtype="<f4").tobytes()
    return header, payload


def artifact_checksum(artifact: EmbeddingArtifact) -> str:
    header, payload = canonical_emb_bytes(artifact)
    return sha256_bytes(header, payload)


def write_artifact(
    artifact: EmbeddingArtifact,
    path: Path | str,
    metadata: "EmbeddingMetadata | None" = None,
    timestamp: str | None = None,
) -> str:
    """Write the binary artifact plus its metadata sidecar; return the digest.

    The digest is SHA-256 over header+payload and is also stored as the
    32-byte file trailer. The sidecar lands at ``<name>.emb.meta.json``; if
    ``metadata`` is not supplied it is computed from the tensor.
    """
    path = Path(path)
    header, payload = canonical_emb_bytes(artifact)
    digest = sha256_bytes(header, payload)
    with atomic_write(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(bytes.fromhex(digest))
    artifact.checksum = digest
    if metadata is None:
        from .embed import compute_metadata  # deferred: embed imports this module

        metadata = compute_metadata(artifact, timestamp=timestamp)
    write_metadata_json(metadata, meta_path_for(path))
    return digest


def read_emb_header(path: Path | str) -> EmbHeader:
    """Parse only the header; never touches the payload."""
    with open(path, "rb") as fh:
        fixed = fh.read(24)
        if len(fixed) < 24 or fixed[:6] != EMB_MAGIC:
            raise BadMagicError(f"{path}: not an embedding artifact")
        version, n_tiles, dim, header_size = struct.unpack("<HQII", fixed[6:24])
        if version != EMB_VERSION:
            raise UnsupportedVersionError(f"{path}: format version {version} unsupported")
        rest = fh.read(header_size - 24)
        if len(rest) < header_size - 24:
            raise TruncatedPayloadError(f"{path}: header truncated")
    strings = []
    offset = 0
    for _ in range(3):
        if offset + 2 > len(rest):
            raise FormatError(f"{path}: header string table corrupt")
        (length,) = struct.unpack_from("<H", rest, offset)
        offset += 2
        strings.append(rest[offset : offset + length].decode("utf-8"))
        offset += length
    return EmbHeader(
        slide_id=strings[0],
        encoder_id=strings[1],
        encoder_version=strings[2],
        n_tiles=n_tiles,
        dim=dim,
        header_size=header_size,
    )


def read_artifact(path: Path | str, verify: bool = True) -> EmbeddingArtifact:
    """Read an embedding artifact; with ``verify`` the digest is recomputed."""
    path = Path(path)
    header = read_emb_header(path)
    size = os.stat(path).st_size
    if size < header.expected_file_bytes:
        raise TruncatedPayloadError(
            f"{path}: {size} bytes on disk, {header.expected_file_bytes} expected "
            f"(partial feature extraction)"
        )
    with open(path, "rb") as fh:
        header_bytes = fh.read(header.header_size)
        payload = fh.read(header.payload_bytes)
        stored = fh.read(EMB_DIGEST_BYTES)
    if verify:
        recomputed = sha256_bytes(header_bytes, payload)
        if recomputed != stored.hex():
            raise ChecksumMismatchError(f"{path}: digest mismatch")
    tensor = np.frombuffer(payload, dtype="<f4").reshape(header.n_tiles, header.dim).copy()
    return EmbeddingArtifact(
        slide_id=header.slide_id,
        encoder_id=header.encoder_id,
        encoder_version=header.encoder_version,
        tensor=tensor,
        checksum=stored.hex(),
    )


# ---------------------------------------------------------------------------
# embedding metadata sidecar

META_FIELD_ORDER = [
    "format_version",
    "slide_id",
    "encoder_id",
    "encoder_version",
    "extraction_timestamp",
    "checksum",
    "n_tiles",
    "dim",
    "embedding_variance",
    "norm_min",
    "norm_max",
    "nan_fraction",
    "inf_fraction",
    "near_duplicate_estimate",
    "qc_status",
]


@dataclass
class EmbeddingMetadata:
    """QC summary statistics plus extraction provenance for one artifact."""

    slide_id: str
    encoder_id: str
    encoder_version: str
    extraction_timestamp: str
    checksum: str
    n_tiles: int
    dim: int
    embedding_variance: float
    norm_min: float
    norm_max: float
    nan_fraction: float
    inf_fraction: float
    near_duplicate_estimate: float
    qc_status: str = "pass"

    def validate(self) -> None:
        if self.qc_status not in QC_STATUSES:
            raise InvalidRecordError(f"unknown qc_status {self.qc_status!r}")
        if math.isfinite(self.norm_min) and math.isfinite(self.norm_max):
            if self.norm_min > self.norm_max:
                raise InvalidRecordError("norm_min exceeds norm_max")
        if self.qc_status == "pass" and (self.nan_fraction != 0 or self.inf_fraction != 0):
            raise InvalidRecordError("qc_status=pass requires zero NaN/Inf fractions")


def _json_num(value: float):
    # JSON has no NaN/Inf; store null and restore NaN on read.
    value = float(value)
    return value if math.isfinite(value) else None


def _from_json_num(value) -> float:
    return float("nan") if value is None else float(value)


def write_metadata_json(meta: EmbeddingMetadata, path: Path | str) -> None:
    meta.validate()
    payload = {
        "format_version": "1",
        "slide_id": meta.slide_id,
        "encoder_id": meta.encoder_id,
        "encoder_version": meta.encoder_version,
        "extraction_timestamp": meta.extraction_timestamp,
        "checksum": meta.checksum,
        "n_tiles": meta.n_tiles,
        "dim": meta.dim,
        "embedding_variance": _json_num(meta.embedding_variance),
        "norm_min": _json_num(meta.norm_min),
        "norm_max": _json_num(meta.norm_max),
        "nan_fraction": _json_num(meta.nan_fraction),
        "inf_fraction": _json_num(meta.inf_fraction),
        "near_duplicate_estimate": _json_num(meta.near_duplicate_estimate),
        "qc_status": meta.qc_status,
    }
    assert list(payload) == META_FIELD_ORDER
    with atomic_write(path, "w") as fh:
        json.dump(payload, fh, indent=2, allow_nan=False)
        fh.write("\n")


def read_metadata_json(path: Path | str) -> EmbeddingMetadata:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid metadata JSON: {exc}") from None
    if payload.get("format_version") != "1":
        raise UnsupportedVersionError(f"{path}: metadata format_version {payload.get('format_version')!r}")
    meta = EmbeddingMetadata(
        slide_id=payload["slide_id"],
        encoder_id=payload["encoder_id"],
        encoder_version=payload["encoder_version"],
        extraction_timestamp=payload["extraction_timestamp"],
        checksum=payload["checksum"],
        n_tiles=int(payload["n_tiles"]),
        dim=int(payload["dim"]),
        embedding_variance=_from_json_num(payload["embedding_variance"]),
        norm_min=_from_json_num(payload["norm_min"]),
        norm_max=_from_json_num(payload["norm_max"]),
        nan_fraction=_from_json_num(payload["nan_fraction"]),
        inf_fraction=_from_json_num(payload["inf_fraction"]),
        near_duplicate_estimate=_from_json_num(payload["near_duplicate_estimate"]),
        qc_status=payload["qc_status"],
    )
    meta.validate()
    return meta


# ---------------------------------------------------------------------------
# label manifests

@dataclass(frozen=True)
class LabelRow:
    patient_id: str
    slide_id: str
    task_id: str
    label: int
    evidence_level: str = "other"


@dataclass
class LabelManifest:
    rows: list[LabelRow] = field(default_factory=list)

    def validate(self) -> None:
        seen = set()
        for row in self.rows:
            if row.label not in (0, 1):
                raise ManifestParseError(f"label must be 0 or 1, got {row.label!r}")
            if row.evidence_level not in EVIDENCE_LEVELS:
                raise ManifestParseError(f"unknown evidence_level {row.evidence_level!r}")
            key = (row.slide_id, row.task_id)
            if key in seen:
                raise ManifestParseError(f"duplicate (slide_id, task_id) pair {key!r}")
            seen.add(key)

    def task_ids(self) -> list[str]:
        return sorted({r.task_id for r in self.rows})

    def rows_for_task(self, task_id: str) -> list[LabelRow]:
        return [r for r in self.rows if r.task_id == task_id]


def write_labels_csv(manifest: LabelManifest, path: Path | str) -> None:
    manifest.validate()
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABEL_MANIFEST_COLUMNS)
        for row in manifest.rows:
            writer.writerow(
                [LABEL_FORMAT_VERSION, row.patient_id, row.slide_id, row.task_id, row.label, row.evidence_level]
            )


def read_labels_csv(path: Path | str) -> LabelManifest:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LABEL_MANIFEST_COLUMNS:
            raise ManifestParseError(f"{path}: bad label manifest columns {header!r}")
        rows = []
        for raw in reader:
            if len(raw) != len(LABEL_MANIFEST_COLUMNS):
                raise ManifestParseError(f"{path}: label row has {len(raw)} fields")
            version, patient_id, slide_id, task_id, label, evidence = raw
            if version != LABEL_FORMAT_VERSION:
                raise UnsupportedVersionError(f"{path}: label format_version {version!r}")
            rows.append(
                LabelRow(
                    patient_id=patient_id,
                    slide_id=slide_id,
                    task_id=task_id,
                    label=_parse_int(label, "label"),
                    evidence_level=evidence,
                )
            )
    manifest = LabelManifest(rows=rows)
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# split manifests

@dataclass
class SplitManifest:
    """Versioned patient-level train/test assignments for repeated splits."""

    task_id: str
    seed: int
    splits: list[dict[str, str]] = field(default_factory=list)

    @property
    def manifest_version(self) -> str:
        return f"splits-v1-seed{self.seed}"

    @property
    def n_splits(self) -> int:
        return len(self.splits)

    def validate(self) -> None:
        if not self.splits:
            raise ManifestParseError("split manifest has no splits")
        patients = set(self.splits[0])
        for k, assignment in enumerate(self.splits):
            if set(assignment) != patients:
                raise ManifestParseError(f"split {k} covers a different patient set")
            for patient, side in assignment.items():
                if side not in ("train", "test"):
                    raise ManifestParseError(f"bad assignment {side!r} for patient {patient}")

    def train_patients(self, split_index: int) -> set[str]:
        return {p for p, side in self.splits[split_index].items() if side == "train"}

    def test_patients(self, split_index: int) -> set[str]:
        return {p for p, side in self.splits[split_index].items() if side == "test"}


def write_split_csv(manifest: SplitManifest, path: Path | str) -> None:
    manifest.validate()
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(SPLIT_MANIFEST_COLUMNS)
        for k, assignment in enumerate(manifest.splits):
            for patient in sorted(assignment):
                writer.writerow(
                    [manifest.manifest_version, manifest.task_id, k, patient, assignment[patient]]
                )


def read_split_csv(path: Path | str) -> SplitManifest:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SPLIT_MANIFEST_COLUMNS:
            raise ManifestParseError(f"{path}: bad split manifest columns {header!r}")
        version = None
        task_id = None
        by_split: dict[int, dict[str, str]] = {}
        for raw in reader:
            if len(raw) != len(SPLIT_MANIFEST_COLUMNS):
                raise ManifestParseError(f"{path}: split row has {len(raw)} fields")
            ver, task, split_index, patient, side = raw
            if version is None:
                version, task_id = ver, task
            elif ver != version or task != task_id:
                raise ManifestParseError(f"{path}: inconsistent version/task across rows")
            k = _parse_int(split_index, "split_index")
            if patient in by_split.setdefault(k, {}):
                raise ManifestParseError(f"{path}: patient {patient} repeated within split {k}")
            by_split[k][patient] = side
    if version is None:
        raise ManifestParseError(f"{path}: split manifest has no rows")
    match = SPLIT_VERSION_PATTERN.match(version)
    if not match:
        raise UnsupportedVersionError(f"{path}: unrecognized manifest_version {version!r}")
    indices = sorted(by_split)
    if indices != list(range(len(indices))):
        raise ManifestParseError(f"{path}: split indices not contiguous: {indices}")
    manifest = SplitManifest(
        task_id=task_id,
        seed=int(match.group(1)),
        splits=[by_split[k] for k in indices],
    )
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# misc helpers

def artifact_equal(a: EmbeddingArtifact, b: EmbeddingArtifact) -> bool:
    """Bit-level structural equality, used by round-trip tests."""
    return (
        a.slide_id == b.slide_id
        and a.encoder_id == b.encoder_id
        and a.encoder_version == b.encoder_version
        and a.tensor.shape == b.tensor.shape
        and a.tensor.tobytes() == b.tensor.tobytes()
    )


def sanitize_task_id(task_id: str) -> str:
    """Filesystem-safe rendering of a ``TUMOR:GENE`` task id."""
    return task_id.replace(":", "_").replace("/", "_")
