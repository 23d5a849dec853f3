"""End-to-end orchestration: tile -> embed -> qc -> tasks/split -> train -> infer -> eval.

Each stage is content-addressed: a unit of work is skipped when its input
fingerprint matches the stage ledger and every recorded output still exists
with a matching digest. Staleness is therefore detected by checksum, never
by timestamp, and a resumed run reproduces byte-identical artifacts (the
extraction timestamp is fixed once per run directory in the resolved config).

The run directory is self-describing: resolved config + pipeline version +
artifact index are sufficient to reproduce and audit the run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import PIPELINE_VERSION
from .cohort import define_tasks, make_splits
from .embed import EncoderSpec, compute_metadata, ingest_embeddings, stub_encode
from .errors import (
    AlignmentError,
    ChecksumMismatchError,
    GoldmarkError,
    MissingArtifactError,
    SlideRejectedError,
)
from .formats import (
    EMB_SUFFIX,
    LabelManifest,
    SlideRecord,
    SplitManifest,
    TileManifest,
    atomic_write,
    discover_slides,
    meta_path_for,
    read_artifact,
    read_labels_csv,
    read_manifest_csv,
    read_split_csv,
    sanitize_task_id,
    sha256_bytes,
    sha256_file,
    utc_now_iso,
    write_artifact,
    write_manifest_csv,
    write_split_csv,
)
from .gma import (
    AttentionExport,
    Bag,
    TrainingConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    infer,
    write_attention_csv,
    write_train_log,
)
from .metrics import (
    PredictionRecord,
    borda_rank,
    build_metric_report,
    read_predictions_csv,
    write_calibration_csv,
    write_delta_csv,
    write_metrics_csv,
    write_plots_json,
    write_predictions_csv,
    write_rank_table_csv,
)
from .qc import QcReport, audit_cohort, build_run_manifest, mark_report_failures, read_qc_csv, write_qc_csv
from .tiler import TilingConfig, detect_tissue, render_overlay, thumbnail_rgb, tile_slide

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

DATA_DIR_ENV = "GOLDMARK_DATA_DIR"

ARTIFACT_KINDS = (
    "manifest",
    "embedding",
    "metadata",
    "weights",
    "predictions",
    "metrics",
    "attention",
    "overlay",
)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class EncoderConfig:
    encoder_id: str
    dim: int
    kind: str = "stub"
    seed: int = 0
    raw_dir: str | None = None  # for kind=ingested: directory of <slide>.raw files

    def spec(self) -> EncoderSpec:
        return EncoderSpec(encoder_id=self.encoder_id, dim=self.dim, kind=self.kind)


@dataclass
class RunConfig:
    slides_dir: Path
    labels_path: Path
    cohort_id: str = "COHORT"
    min_positives: int = 15
    split_seed: int = 0
    n_splits: int = 5
    train_frac: float = 0.7
    tiling: TilingConfig = field(default_factory=TilingConfig)
    encoders: list[EncoderConfig] = field(default_factory=list)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    low_variance_rel: float = 1e-6
    attention_percentile: float = 75.0


def data_root(override: Path | str | None = None) -> Path | None:
    if override is not None:
        return Path(override)
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else None


def load_run_config(toml_path: Path | str, base_dir: Path | str | None = None) -> RunConfig:
    """Parse the declarative run config; relative paths resolve against the
    GOLDMARK_DATA_DIR override when set, else against the config file's directory."""
    toml_path = Path(toml_path)
    with open(toml_path, "rb") as fh:
        raw = tomllib.load(fh)
    base = data_root(base_dir) or toml_path.parent

    def resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else base / path

    paths = raw.get("paths", {})
    cohort = raw.get("cohort", {})
    tiling_raw = {k: v for k, v in raw.get("tiling", {}).items()}
    training_raw = raw.get("training", {})
    qc_raw = raw.get("qc", {})
    encoders = [
        EncoderConfig(
            encoder_id=e["encoder_id"],
            dim=int(e["dim"]),
            kind=e.get("kind", "stub"),
            seed=int(e.get("seed", 0)),
            raw_dir=str(resolve(e["raw_dir"])) if "raw_dir" in e else None,
        )
        for e in raw.get("encoders", [])
    ]
    if not encoders:
        raise GoldmarkError(f"{toml_path}: config declares no encoders")
    return RunConfig(
        slides_dir=resolve(paths.get("slides_dir", "slides")),
        labels_path=resolve(paths.get("labels", "labels.csv")),
        cohort_id=cohort.get("cohort_id", "COHORT"),
        min_positives=int(cohort.get("min_positives", 15)),
        split_seed=int(cohort.get("seed", 0)),
        n_splits=int(cohort.get("n_splits", 5)),
        train_frac=float(cohort.get("train_frac", 0.7)),
        tiling=TilingConfig(**tiling_raw),
        encoders=encoders,
        training=TrainingConfig(**training_raw),
        low_variance_rel=float(qc_raw.get("low_variance_rel", 1e-6)),
        attention_percentile=float(raw.get("overlay", {}).get("attention_percentile", 75.0)),
    )


def resolved_config_dict(config: RunConfig, timestamp: str) -> dict:
    payload = dataclasses.asdict(config)
    payload["slides_dir"] = str(config.slides_dir)
    payload["labels_path"] = str(config.labels_path)
    payload["tiling"]["pen_hue_rules"] = [dataclasses.asdict(r) for r in config.tiling.pen_hue_rules]
    return {
        "format_version": "1",
        "pipeline_version": PIPELINE_VERSION,
        "provenance_timestamp": timestamp,
        "config": payload,
    }


def _persist_resolved_config(config: RunConfig, run_dir: Path) -> str:
    """Fix the run's provenance timestamp once; reruns reuse it so resumed
    stages regenerate byte-identical artifacts."""
    path = run_dir / "resolved_config.json"
    if path.exists():
        timestamp = json.loads(path.read_text())["provenance_timestamp"]
    else:
        timestamp = utc_now_iso()
    payload = resolved_config_dict(config, timestamp)
    encoded = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if not path.exists() or path.read_text() != encoded:
        with atomic_write(path, "w") as fh:
            fh.write(encoded)
    return timestamp


# ---------------------------------------------------------------------------
# stage ledgers (content-addressed skip logic)

def _fingerprint(*parts) -> str:
    return sha256_bytes(json.dumps(parts, sort_keys=True, default=str).encode())


class _Ledger:
    def __init__(self, path: Path, run_dir: Path):
        self.path = path
        self.run_dir = run_dir
        self.records: dict[str, dict] = {}
        if path.exists():
            self.records = json.loads(path.read_text())

    def can_skip(self, unit: str, fingerprint: str) -> bool:
        record = self.records.get(unit)
        if record is None or record["fingerprint"] != fingerprint:
            return False
        for rel, digest in record["outputs"].items():
            target = self.run_dir / rel
            if not target.exists() or sha256_file(target) != digest:
                return False
        return True

    def note(self, unit: str) -> str | None:
        record = self.records.get(unit)
        return record.get("note") if record else None

    def commit(self, unit: str, fingerprint: str, outputs: Iterable[Path], note: str | None = None):
        entry = {
            "fingerprint": fingerprint,
            "outputs": {
                str(Path(p).relative_to(self.run_dir)): sha256_file(p) for p in outputs
            },
        }
        if note is not None:
            entry["note"] = note
        self.records[unit] = entry

    def save(self):
        with atomic_write(self.path, "w") as fh:
            json.dump(self.records, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# artifact index

@dataclass(frozen=True)
class IndexEntry:
    artifact_id: str
    kind: str
    task_id: str
    encoder_id: str
    split: str
    version: str
    path: str  # relative to the run directory
    checksum: str
    bytes: int


@dataclass
class ArtifactIndex:
    run_dir: Path
    entries: list[IndexEntry] = field(default_factory=list)

    def entry_by_id(self, artifact_id: str) -> IndexEntry | None:
        for e in self.entries:
            if e.artifact_id == artifact_id:
                return e
        return None

    def filtered(self, **filters: str) -> list[IndexEntry]:
        out = self.entries
        for key, value in filters.items():
            if value is None:
                continue
            attr = {"kind": "kind", "task": "task_id", "encoder": "encoder_id", "split": "split"}[key]
            out = [e for e in out if getattr(e, attr) == value]
        return out

    def validate(self) -> None:
        for e in self.entries:
            target = self.run_dir / e.path
            if not target.exists():
                raise MissingArtifactError([e.path])
            if sha256_file(target) != e.checksum:
                raise ChecksumMismatchError(f"{e.path}: indexed digest mismatch")


def _artifact_id(kind: str, rel_path: str) -> str:
    return hashlib.sha256(f"{kind}:{rel_path}".encode()).hexdigest()[:16]


_INDEX_RULES = [
    # (glob, kind, parser) where parser(path) -> (task_key, encoder, split)
    ("manifests/*.csv", "manifest", lambda p: ("", "", "")),
    ("tasks/tasks.csv", "manifest", lambda p: ("", "", "")),
    ("splits/*.csv", "manifest", lambda p: (p.stem, "", "")),
    ("runs/*.run.json", "manifest", lambda p: _parse_task_encoder(p.name[: -len(".run.json")])),
    ("embeddings/*/*.emb", "embedding", lambda p: ("", p.parent.name, "")),
    ("embeddings/*/*.emb.meta.json", "metadata", lambda p: ("", p.parent.name, "")),
    ("qc/*.csv", "metadata", lambda p: ("", p.stem, "")),
    ("models/*/*/*.gmw", "weights", lambda p: _parse_weights(p)),
    ("predictions/*.csv", "predictions", lambda p: _parse_task_encoder(p.stem)),
    ("attention/*.csv", "attention", lambda p: _parse_attention(p.stem)),
    ("metrics/*.csv", "metrics", lambda p: _parse_metrics(p.stem)),
    ("plots/*.json", "metrics", lambda p: _parse_task_encoder(p.stem)),
    ("overlays/*.png", "overlay", lambda p: ("", "", "")),
    ("attention_overlays/*.png", "overlay", lambda p: ("", "", "")),
]


def _parse_task_encoder(stem: str) -> tuple[str, str, str]:
    if "__" not in stem:
        return ("", "", "")
    task_key, encoder = stem.split("__", 1)
    return (task_key, encoder, "")


def _parse_attention(stem: str) -> tuple[str, str, str]:
    match = re.match(r"^(.*)__(.*)__split(\d+)$", stem)
    if not match:
        return _parse_task_encoder(stem)
    return (match.group(1), match.group(2), match.group(3))


def _parse_metrics(stem: str) -> tuple[str, str, str]:
    if stem == "rank_table":
        return ("", "", "")
    for suffix in (".metrics", ".calibration", ".deltas"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    return _parse_task_encoder(stem)


def _parse_weights(p: Path) -> tuple[str, str, str]:
    match = re.match(r"^split(\d+)\.", p.name)
    return (p.parent.parent.name, p.parent.name, match.group(1) if match else "")


def build_index(run_dir: Path | str) -> ArtifactIndex:
    """Catalog every run artifact with its digest; .FAILED files are left out."""
    run_dir = Path(run_dir)
    task_names = _task_name_map(run_dir)
    entries = []
    for pattern, kind, parser in _INDEX_RULES:
        for path in sorted(run_dir.glob(pattern)):
            if path.name.endswith(".FAILED"):
                continue
            rel = str(path.relative_to(run_dir))
            task_key, encoder, split = parser(path)
            entries.append(
                IndexEntry(
                    artifact_id=_artifact_id(kind, rel),
                    kind=kind,
                    task_id=task_names.get(task_key, task_key),
                    encoder_id=encoder,
                    split=split,
                    version=PIPELINE_VERSION,
                    path=rel,
                    checksum=sha256_file(path),
                    bytes=path.stat().st_size,
                )
            )
    entries.sort(key=lambda e: e.path)
    return ArtifactIndex(run_dir=run_dir, entries=entries)


def _task_name_map(run_dir: Path) -> dict[str, str]:
    """sanitized task key -> real task id, from the tasks stage output."""
    tasks_csv = run_dir / "tasks" / "tasks.csv"
    mapping: dict[str, str] = {}
    if tasks_csv.exists():
        import csv as _csv

        with open(tasks_csv, newline="") as fh:
            reader = _csv.DictReader(fh)
            for row in reader:
                mapping[sanitize_task_id(row["task_id"])] = row["task_id"]
    return mapping


def write_index(index: ArtifactIndex, path: Path | str | None = None) -> Path:
    path = Path(path) if path else index.run_dir / "index.json"
    payload = {
        "format_version": "1",
        "pipeline_version": PIPELINE_VERSION,
        "entries": [dataclasses.asdict(e) for e in index.entries],
    }
    with atomic_write(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_index(run_dir: Path | str) -> ArtifactIndex:
    run_dir = Path(run_dir)
    payload = json.loads((run_dir / "index.json").read_text())
    return ArtifactIndex(
        run_dir=run_dir,
        entries=[IndexEntry(**e) for e in payload["entries"]],
    )


# ---------------------------------------------------------------------------
# attention overlays

def export_attention_overlay(
    slide: SlideRecord,
    manifest: TileManifest,
    export: AttentionExport,
    percentile: float,
    out_path: Path | str,
) -> Path:
    """Shade tiles whose attention reaches the given percentile of the slide's
    attention distribution (ties at the threshold included)."""
    if not (0.0 <= percentile <= 100.0):
        raise ValueError("percentile must lie in [0, 100]")
    rows = export.rows_for_slide(slide.slide_id)
    indices = sorted(idx for idx, _ in rows)
    if indices != [r.index for r in manifest.rows]:
        raise AlignmentError(
            f"{slide.slide_id}: attention tile_index set does not match the manifest"
        )
    by_index = {idx: a for idx, a in rows}
    values = np.array([by_index[r.index] for r in manifest.rows], dtype=np.float64)
    threshold = float(np.percentile(values, percentile)) if len(values) else 0.0

    thumb, ds = thumbnail_rgb(slide)
    img = np.clip(np.round(thumb * 255.0), 0, 255).astype(np.uint8)
    shade = np.array([220, 30, 30], dtype=np.float64)
    for row in manifest.rows:
        if by_index[row.index] < threshold:
            continue
        x0 = int(math.floor(row.x / ds))
        y0 = int(math.floor(row.y / ds))
        x1 = min(int(math.ceil((row.x + manifest.tile_px) / ds)), img.shape[1])
        y1 = min(int(math.ceil((row.y + manifest.tile_px) / ds)), img.shape[0])
        region = img[y0:y1, x0:x1].astype(np.float64)
        img[y0:y1, x0:x1] = np.clip(np.round(0.5 * region + 0.5 * shade), 0, 255).astype(np.uint8)

    out_path = Path(out_path)
    from PIL import Image

    with atomic_write(out_path, "wb") as fh:
        Image.fromarray(img).save(fh, format="PNG")
    return out_path


# ---------------------------------------------------------------------------
# the pipeline

@dataclass
class RunResult:
    run_dir: Path
    index: ArtifactIndex
    actions: list[dict]
    exclusions: dict[str, str]


def _tiling_fingerprint_dict(tiling: TilingConfig) -> dict:
    payload = dataclasses.asdict(tiling)
    payload["pen_hue_rules"] = [dataclasses.asdict(r) for r in tiling.pen_hue_rules]
    return payload


PIPELINE_STAGES = ("tile", "embed", "qc", "tasks", "split", "train", "infer", "eval")


def run_pipeline(
    config: RunConfig, out_dir: Path | str, progress=None, stages: set[str] | None = None
) -> RunResult:
    """Execute every stage, skipping units whose inputs and outputs are unchanged.

    With ``stages`` given, only those stages may execute; any other stage whose
    outputs are missing or stale is an error (run stages in order instead).
    """
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    timestamp = _persist_resolved_config(config, run_dir)
    actions: list[dict] = []

    def log(stage: str, unit: str, action: str):
        actions.append({"stage": stage, "unit": unit, "action": action})
        if progress:
            progress(f"[{stage}] {unit}: {action}")

    def gate(stage: str, unit: str):
        if stages is not None and stage not in stages:
            raise GoldmarkError(
                f"stage {stage} ({unit}) has missing or stale outputs but this "
                f"invocation only runs {sorted(stages)}; run upstream stages first"
            )

    slides = discover_slides(config.slides_dir)
    if not slides:
        raise GoldmarkError(f"no slides with sidecars under {config.slides_dir}")
    labels = read_labels_csv(config.labels_path)
    labels_digest = sha256_file(config.labels_path)
    by_slide = {s.slide_id: s for s in slides}
    raster_digests = {s.slide_id: sha256_file(s.source_path) for s in slides}

    # --- stage: tile -------------------------------------------------------
    tile_ledger = _Ledger(run_dir / "stages" / "tile.json", run_dir)
    manifests: dict[str, TileManifest] = {}
    exclusions: dict[str, str] = {}
    tiling_fp_part = _tiling_fingerprint_dict(config.tiling)
    for record in slides:
        unit = record.slide_id
        fp = _fingerprint("tile", raster_digests[unit], record.mpp, tiling_fp_part)
        manifest_path = run_dir / "manifests" / f"{unit}.csv"
        overlay_path = run_dir / "overlays" / f"{unit}.png"
        if tile_ledger.can_skip(unit, fp):
            note = tile_ledger.note(unit)
            if note:
                exclusions[unit] = note
            else:
                manifests[unit] = read_manifest_csv(manifest_path)
            log("tile", unit, "skipped")
            continue
        gate("tile", unit)
        try:
            mask = detect_tissue(record, config.tiling)
            manifest = tile_slide(record, mask, config.tiling)
        except SlideRejectedError as exc:
            exclusions[unit] = str(exc)
            tile_ledger.commit(unit, fp, [], note=str(exc))
            log("tile", unit, "excluded")
            continue
        if not manifest.rows:
            note = f"{unit}: no tiles met the inclusion criteria"
            exclusions[unit] = note
            tile_ledger.commit(unit, fp, [], note=note)
            log("tile", unit, "excluded")
            continue
        write_manifest_csv(manifest, manifest_path)
        render_overlay(record, manifest, overlay_path)
        tile_ledger.commit(unit, fp, [manifest_path, overlay_path])
        manifests[unit] = manifest
        log("tile", unit, "executed")
    tile_ledger.save()

    # --- stage: embed ------------------------------------------------------
    embed_ledger = _Ledger(run_dir / "stages" / "embed.json", run_dir)
    emb_paths: dict[tuple[str, str], Path] = {}
    for enc in config.encoders:
        spec = enc.spec()
        for slide_id in sorted(manifests):
            unit = f"{enc.encoder_id}/{slide_id}"
            manifest_path = run_dir / "manifests" / f"{slide_id}.csv"
            emb_path = run_dir / "embeddings" / enc.encoder_id / f"{slide_id}{EMB_SUFFIX}"
            emb_paths[(enc.encoder_id, slide_id)] = emb_path
            fp_parts = [
                "embed",
                sha256_file(manifest_path),
                raster_digests[slide_id],
                dataclasses.asdict(enc),
                timestamp,
            ]
            if enc.kind == "ingested":
                raw_path = Path(enc.raw_dir or "") / f"{slide_id}.raw"
                if not raw_path.exists():
                    raise MissingArtifactError([slide_id], f"raw tensor missing: {raw_path}")
                fp_parts.append(sha256_file(raw_path))
            fp = _fingerprint(*fp_parts)
            if embed_ledger.can_skip(unit, fp):
                log("embed", unit, "skipped")
                continue
            gate("embed", unit)
            if enc.kind == "stub":
                artifact = stub_encode(by_slide[slide_id], manifests[slide_id], spec, enc.seed)
            else:
                artifact = ingest_embeddings(raw_path, manifests[slide_id], spec)
            metadata = compute_metadata(
                artifact, timestamp=timestamp, low_variance_rel=config.low_variance_rel
            )
            write_artifact(artifact, emb_path, metadata=metadata)
            embed_ledger.commit(unit, fp, [emb_path, meta_path_for(emb_path)])
            log("embed", unit, "executed")
    embed_ledger.save()

    # --- stage: qc ---------------------------------------------------------
    qc_ledger = _Ledger(run_dir / "stages" / "qc.json", run_dir)
    qc_reports: dict[str, QcReport] = {}
    for enc in config.encoders:
        unit = enc.encoder_id
        qc_path = run_dir / "qc" / f"{enc.encoder_id}.csv"
        input_digests = []
        for slide_id in sorted(manifests):
            emb_path = emb_paths[(enc.encoder_id, slide_id)]
            input_digests.append(sha256_file(run_dir / "manifests" / f"{slide_id}.csv"))
            input_digests.append(_artifact_file_digest(emb_path))
        fp = _fingerprint("qc", input_digests, config.low_variance_rel)
        if qc_ledger.can_skip(unit, fp):
            qc_reports[enc.encoder_id] = read_qc_csv(qc_path)
            log("qc", unit, "skipped")
            continue
        gate("qc", unit)
        pairs = [(manifests[s], emb_paths[(enc.encoder_id, s)]) for s in sorted(manifests)]
        report = audit_cohort(pairs, encoder_id=enc.encoder_id, low_variance_rel=config.low_variance_rel)
        integrity_failures = {
            r.slide_id: emb_paths[(enc.encoder_id, r.slide_id)]
            for r in report.rows
            if r.status in ("failed_cardinality", "failed_checksum")
        }
        renamed = mark_report_failures(report, integrity_failures)
        write_qc_csv(report, qc_path)
        qc_ledger.commit(unit, fp, [qc_path], note=f"renamed {len(renamed)} artifacts" if renamed else None)
        qc_reports[enc.encoder_id] = report
        log("qc", unit, "executed")
    qc_ledger.save()

    # --- stage: tasks ------------------------------------------------------
    eligible = set(manifests)
    for enc in config.encoders:
        eligible &= qc_reports[enc.encoder_id].passing_slides(enc.encoder_id)
    tasks_ledger = _Ledger(run_dir / "stages" / "tasks.json", run_dir)
    tasks_path = run_dir / "tasks" / "tasks.csv"
    fp = _fingerprint("tasks", labels_digest, sorted(eligible), config.min_positives)
    if tasks_ledger.can_skip("tasks", fp):
        log("tasks", "tasks", "skipped")
    else:
        gate("tasks", "tasks")
        task_defs = define_tasks(labels, slides, config.min_positives, eligible_slides=eligible)
        _write_tasks_csv(task_defs, tasks_path)
        tasks_ledger.commit("tasks", fp, [tasks_path])
        log("tasks", "tasks", "executed")
        tasks_ledger.save()
    task_defs = _read_tasks_csv(tasks_path)
    included_tasks = [t for t in task_defs if t.included]

    # --- stage: split ------------------------------------------------------
    split_ledger = _Ledger(run_dir / "stages" / "split.json", run_dir)
    split_paths: dict[str, Path] = {}
    for task in included_tasks:
        unit = task.task_id
        split_path = run_dir / "splits" / f"{sanitize_task_id(task.task_id)}.csv"
        split_paths[task.task_id] = split_path
        fp = _fingerprint(
            "split", labels_digest, sorted(eligible), dataclasses.asdict(task),
            config.split_seed, config.n_splits, config.train_frac,
        )
        if split_ledger.can_skip(unit, fp):
            log("split", unit, "skipped")
            continue
        gate("split", unit)
        eligible_labels = LabelManifest(
            rows=[r for r in labels.rows if r.task_id == task.task_id and r.slide_id in eligible]
        )
        manifest = make_splits(
            task, eligible_labels, config.split_seed, n_splits=config.n_splits, train_frac=config.train_frac
        )
        write_split_csv(manifest, split_path)
        split_ledger.commit(unit, fp, [split_path])
        log("split", unit, "executed")
    split_ledger.save()

    # --- stage: train ------------------------------------------------------
    train_ledger = _Ledger(run_dir / "stages" / "train.json", run_dir)
    for task in included_tasks:
        labeled_all = {r.slide_id for r in labels.rows_for_task(task.task_id)}
        labeled = sorted(labeled_all - set(exclusions))
        split_manifest = read_split_csv(split_paths[task.task_id])
        for enc in config.encoders:
            unit = f"{task.task_id}/{enc.encoder_id}"
            run_manifest = build_run_manifest(
                task.task_id, enc.encoder_id, config.split_seed, labeled, qc_reports[enc.encoder_id]
            )
            run_manifest.exclusions.update(
                {s: exclusions[s] for s in exclusions if s in labeled_all}
            )
            stem = f"{sanitize_task_id(task.task_id)}__{enc.encoder_id}"
            model_dir = run_dir / "models" / sanitize_task_id(task.task_id) / enc.encoder_id
            log_path = run_dir / "logs" / f"{stem}.train.csv"
            run_manifest_path = run_dir / "runs" / f"{stem}.run.json"
            emb_digests = [
                _artifact_file_digest(emb_paths[(enc.encoder_id, s)]) for s in run_manifest.slides
            ]
            fp = _fingerprint(
                "train", sha256_file(split_paths[task.task_id]), emb_digests,
                dataclasses.asdict(config.training), run_manifest.slides,
            )
            ckpt_paths = [
                model_dir / f"split{k}.{kind}.gmw"
                for k in range(config.n_splits)
                for kind in ("best", "final")
            ]
            outputs = ckpt_paths + [log_path, run_manifest_path]
            if train_ledger.can_skip(unit, fp):
                log("train", unit, "skipped")
                continue
            gate("train", unit)
            bags = _load_bags(task.task_id, run_manifest.slides, emb_paths, enc.encoder_id, labels, by_slide)
            outcomes = train(
                task.task_id,
                enc.encoder_id,
                split_manifest,
                bags,
                config.training,
                expected_slides=run_manifest.slides,
            )
            rows = []
            for outcome in outcomes:
                save_checkpoint(outcome.best, model_dir / f"split{outcome.split_index}.best.gmw")
                save_checkpoint(outcome.final, model_dir / f"split{outcome.split_index}.final.gmw")
                rows.extend(outcome.log)
            write_train_log(rows, log_path)
            _write_run_manifest_json(run_manifest, split_manifest, run_manifest_path)
            train_ledger.commit(unit, fp, outputs)
            log("train", unit, "executed")
    train_ledger.save()

    # --- stage: infer ------------------------------------------------------
    infer_ledger = _Ledger(run_dir / "stages" / "infer.json", run_dir)
    prediction_paths: dict[tuple[str, str], Path] = {}
    for task in included_tasks:
        split_manifest = read_split_csv(split_paths[task.task_id])
        for enc in config.encoders:
            unit = f"{task.task_id}/{enc.encoder_id}"
            stem = f"{sanitize_task_id(task.task_id)}__{enc.encoder_id}"
            model_dir = run_dir / "models" / sanitize_task_id(task.task_id) / enc.encoder_id
            pred_path = run_dir / "predictions" / f"{stem}.csv"
            prediction_paths[(task.task_id, enc.encoder_id)] = pred_path
            run_manifest = build_run_manifest(
                task.task_id, enc.encoder_id, config.split_seed,
                sorted({r.slide_id for r in labels.rows_for_task(task.task_id) if r.slide_id not in exclusions}),
                qc_reports[enc.encoder_id],
            )
            ckpt_digests = [
                sha256_file(model_dir / f"split{k}.{kind}.gmw")
                for k in range(config.n_splits)
                for kind in ("best", "final")
            ]
            emb_digests = [
                _artifact_file_digest(emb_paths[(enc.encoder_id, s)]) for s in run_manifest.slides
            ]
            fp = _fingerprint("infer", ckpt_digests, emb_digests, run_manifest.slides)
            attention_paths = [
                run_dir / "attention" / f"{stem}__split{k}.csv" for k in range(config.n_splits)
            ]
            outputs = [pred_path] + attention_paths
            if infer_ledger.can_skip(unit, fp):
                log("infer", unit, "skipped")
                continue
            gate("infer", unit)
            bags = _load_bags(task.task_id, run_manifest.slides, emb_paths, enc.encoder_id, labels, by_slide)
            records: list[PredictionRecord] = []
            for k in range(config.n_splits):
                test_patients = split_manifest.test_patients(k)
                test_bags = {s: b for s, b in bags.items() if b.patient_id in test_patients}
                exports = []
                for kind_name, file_kind in (("best", "best_auc"), ("final", "final_epoch")):
                    checkpoint = load_checkpoint(model_dir / f"split{k}.{kind_name}.gmw")
                    predictions, export = infer(checkpoint, test_bags)
                    exports.append(export)
                    for p in predictions:
                        records.append(
                            PredictionRecord(
                                slide_id=p.slide_id,
                                patient_id=p.patient_id,
                                task_id=task.task_id,
                                split_index=k,
                                checkpoint_kind=file_kind,
                                context="cv",
                                probability=p.probability,
                                label=p.label,
                            )
                        )
                write_attention_csv(exports, attention_paths[k])
            write_predictions_csv(records, pred_path)
            infer_ledger.commit(unit, fp, outputs)
            log("infer", unit, "executed")
    infer_ledger.save()

    # --- stage: eval -------------------------------------------------------
    eval_ledger = _Ledger(run_dir / "stages" / "eval.json", run_dir)
    mean_table: dict[tuple[str, str], dict[str, dict[str, float]]] = {}
    for task in included_tasks:
        for enc in config.encoders:
            unit = f"{task.task_id}/{enc.encoder_id}"
            stem = f"{sanitize_task_id(task.task_id)}__{enc.encoder_id}"
            pred_path = prediction_paths[(task.task_id, enc.encoder_id)]
            out_paths = [
                run_dir / "metrics" / f"{stem}.metrics.csv",
                run_dir / "metrics" / f"{stem}.calibration.csv",
                run_dir / "metrics" / f"{stem}.deltas.csv",
                run_dir / "plots" / f"{stem}.json",
            ]
            fp = _fingerprint("eval", sha256_file(pred_path))
            records = read_predictions_csv(pred_path)
            report = build_metric_report(records, task.task_id, enc.encoder_id)
            if eval_ledger.can_skip(unit, fp):
                log("eval", unit, "skipped")
            else:
                gate("eval", unit)
                write_metrics_csv([report], out_paths[0])
                write_calibration_csv([report], out_paths[1])
                write_delta_csv([report], out_paths[2])
                write_plots_json(report, out_paths[3])
                eval_ledger.commit(unit, fp, out_paths)
                log("eval", unit, "executed")
            for cell in report.cells:
                mean_table.setdefault((cell.context, cell.checkpoint_kind), {}).setdefault(
                    task.task_id, {}
                )[enc.encoder_id] = cell.mean_auroc

    rank_path = run_dir / "metrics" / "rank_table.csv"
    if mean_table:
        ranks_by_cell = {
            cell: borda_rank(table) for cell, table in sorted(mean_table.items())
        }
        write_rank_table_csv(ranks_by_cell, rank_path)
        log("eval", "rank_table", "executed")
    eval_ledger.save()

    index = build_index(run_dir)
    write_index(index)
    _write_run_log(actions, run_dir / "run_log.jsonl")
    return RunResult(run_dir=run_dir, index=index, actions=actions, exclusions=exclusions)


def _artifact_file_digest(emb_path: Path) -> str:
    """Digest of the artifact file, falling back to its .FAILED twin."""
    if emb_path.exists():
        return sha256_file(emb_path)
    failed = emb_path.with_name(emb_path.name + ".FAILED")
    if failed.exists():
        return sha256_file(failed)
    return "missing"


def _load_bags(
    task_id: str,
    slide_ids: Iterable[str],
    emb_paths: Mapping[tuple[str, str], Path],
    encoder_id: str,
    labels: LabelManifest,
    by_slide: Mapping[str, SlideRecord],
) -> dict[str, Bag]:
    label_by_slide = {r.slide_id: r.label for r in labels.rows_for_task(task_id)}
    bags = {}
    for slide_id in slide_ids:
        artifact = read_artifact(emb_paths[(encoder_id, slide_id)])
        bags[slide_id] = Bag(
            slide_id=slide_id,
            patient_id=by_slide[slide_id].patient_id,
            label=label_by_slide[slide_id],
            features=artifact.tensor,
        )
    return bags


TASKS_COLUMNS = ["task_id", "cohort_id", "n_total", "n_positive", "n_negative", "included"]


def _write_tasks_csv(task_defs, path: Path) -> None:
    import csv as _csv

    with atomic_write(path, "w") as fh:
        writer = _csv.writer(fh)
        writer.writerow(TASKS_COLUMNS)
        for t in task_defs:
            writer.writerow(
                [t.task_id, t.cohort_id, t.n_total, t.n_positive, t.n_negative, int(t.included)]
            )


def _read_tasks_csv(path: Path):
    import csv as _csv

    from .cohort import TaskDefinition

    tasks = []
    with open(path, newline="") as fh:
        reader = _csv.DictReader(fh)
        for row in reader:
            tasks.append(
                TaskDefinition(
                    task_id=row["task_id"],
                    cohort_id=row["cohort_id"],
                    n_total=int(row["n_total"]),
                    n_positive=int(row["n_positive"]),
                    n_negative=int(row["n_negative"]),
                    included=bool(int(row["included"])),
                )
            )
    return tasks


def _write_run_manifest_json(run_manifest, split_manifest: SplitManifest, path: Path) -> None:
    payload = {
        "format_version": "1",
        "task_id": run_manifest.task_id,
        "encoder_id": run_manifest.encoder_id,
        "split_manifest_version": split_manifest.manifest_version,
        "slides": run_manifest.slides,
        "exclusions": dict(sorted(run_manifest.exclusions.items())),
    }
    with atomic_write(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_run_log(actions: list[dict], path: Path) -> None:
    with atomic_write(path, "w") as fh:
        for action in actions:
            fh.write(json.dumps(action, sort_keys=True) + "\n")
