"""Command-line entry point: one verb per pipeline capability.

``run`` orchestrates everything (resumable); the other verbs are file-level
tools over explicit paths or an existing run directory. Relative paths in
configs resolve against GOLDMARK_DATA_DIR when set.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import PIPELINE_VERSION
from .cohort import MIN_POSITIVES_DEFAULT, TaskDefinition, make_splits, patient_labels
from .embed import EncoderSpec, compute_metadata, ingest_embeddings, stub_encode, validate_ingest_dim
from .errors import GoldmarkError
from .formats import (
    EMB_SUFFIX,
    discover_slides,
    read_labels_csv,
    read_manifest_csv,
    sanitize_task_id,
    write_artifact,
    write_manifest_csv,
    write_split_csv,
)
from .gma import read_attention_csv
from .metrics import (
    build_metric_report,
    read_predictions_csv,
    write_calibration_csv,
    write_delta_csv,
    write_metrics_csv,
    write_plots_json,
)
from .pipeline import (
    build_index,
    export_attention_overlay,
    load_run_config,
    read_index,
    run_pipeline,
    write_index,
)
from .qc import audit_cohort, mark_report_failures, write_qc_csv
from .tiler import TilingConfig, detect_tissue, render_overlay, tile_slide
from .errors import SlideRejectedError


def _tiling_from_toml(config_path: str | None) -> TilingConfig:
    if config_path is None:
        return TilingConfig()
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(config_path, "rb") as fh:
        raw = tomllib.load(fh)
    return TilingConfig(**raw.get("tiling", {}))


@click.group()
@click.version_option(version=PIPELINE_VERSION)
def main():
    """Governed slide-level biomarker modeling pipeline."""


@main.command()
@click.option("--slides", "slides_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def tile(slides_dir, config_path, out_dir):
    """Detect tissue and write tile manifests plus QC overlays."""
    cfg = _tiling_from_toml(config_path)
    out = Path(out_dir)
    for record in discover_slides(slides_dir):
        try:
            mask = detect_tissue(record, cfg)
            manifest = tile_slide(record, mask, cfg)
        except SlideRejectedError as exc:
            click.echo(f"REJECTED {record.slide_id}: {exc}")
            continue
        write_manifest_csv(manifest, out / "manifests" / f"{record.slide_id}.csv")
        render_overlay(record, manifest, out / "overlays" / f"{record.slide_id}.png")
        click.echo(f"{record.slide_id}: {len(manifest.rows)} tiles (tile_px={manifest.tile_px})")


@main.command()
@click.option("--slides", "slides_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--manifests", "manifests_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--encoder", "encoder_id", default="stub-v1", show_default=True)
@click.option("--dim", default=48, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def embed(slides_dir, manifests_dir, encoder_id, dim, seed, out_dir):
    """Encode tiles with the deterministic stub encoder."""
    spec = EncoderSpec(encoder_id=encoder_id, dim=dim, kind="stub")
    out = Path(out_dir)
    for record in discover_slides(slides_dir):
        manifest_path = Path(manifests_dir) / f"{record.slide_id}.csv"
        if not manifest_path.exists():
            click.echo(f"SKIP {record.slide_id}: no manifest")
            continue
        manifest = read_manifest_csv(manifest_path)
        artifact = stub_encode(record, manifest, spec, seed)
        digest = write_artifact(artifact, out / f"{record.slide_id}{EMB_SUFFIX}")
        click.echo(f"{record.slide_id}: {artifact.n_tiles}x{artifact.dim} sha256={digest[:12]}")


@main.command()
@click.option("--raw", "raw_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--encoder", "encoder_id", required=True)
@click.option("--dims", required=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def ingest(raw_path, manifest_path, encoder_id, dims, out_path):
    """Wrap an externally computed raw float32 tensor into the canonical format."""
    spec = EncoderSpec(encoder_id=encoder_id, dim=dims, kind="ingested")
    validate_ingest_dim(spec, dims)
    manifest = read_manifest_csv(manifest_path)
    artifact = ingest_embeddings(raw_path, manifest, spec)
    digest = write_artifact(artifact, out_path)
    click.echo(f"{artifact.slide_id}: ingested {artifact.n_tiles}x{artifact.dim} sha256={digest[:12]}")


@main.command()
@click.option("--cohort", "cohort_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory holding manifests/ and embeddings/<encoder>/")
@click.option("--encoders", required=True, help="Comma-separated encoder ids")
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False))
@click.option("--mark-failures", is_flag=True, help="Rename artifacts failing integrity checks")
def qc(cohort_dir, encoders, report_path, mark_failures):
    """Audit tile-feature cardinality, checksums, and embedding degeneracy."""
    from .qc import QcReport

    cohort = Path(cohort_dir)
    combined = QcReport()
    for encoder_id in [e.strip() for e in encoders.split(",") if e.strip()]:
        pairs = []
        emb_dir = cohort / "embeddings" / encoder_id
        for manifest_path in sorted((cohort / "manifests").glob("*.csv")):
            manifest = read_manifest_csv(manifest_path)
            pairs.append((manifest, emb_dir / f"{manifest.slide_id}{EMB_SUFFIX}"))
        report = audit_cohort(pairs, encoder_id=encoder_id)
        if mark_failures:
            targets = {
                r.slide_id: emb_dir / f"{r.slide_id}{EMB_SUFFIX}"
                for r in report.rows
                if r.status in ("failed_cardinality", "failed_checksum")
            }
            for renamed in mark_report_failures(report, targets):
                click.echo(f"marked failed: {renamed}")
        combined.rows.extend(report.rows)
    write_qc_csv(combined, report_path)
    click.echo(
        f"{combined.n_pass}/{len(combined.rows)} pass "
        f"(pass rate {100.0 * combined.pass_rate:.2f}%) -> {report_path}"
    )


@main.command()
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--min-positives", default=MIN_POSITIVES_DEFAULT, show_default=True, type=int)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
def tasks(labels_path, min_positives, out_path):
    """Apply the positives-count inclusion rule to every labeled task."""
    labels = read_labels_csv(labels_path)
    rows = []
    for task_id in labels.task_ids():
        per_patient = patient_labels(labels, task_id)
        n_pos = sum(per_patient.values())
        rows.append(
            TaskDefinition(
                task_id=task_id,
                cohort_id=task_id.split(":")[0],
                n_total=len(per_patient),
                n_positive=n_pos,
                n_negative=len(per_patient) - n_pos,
                included=n_pos >= min_positives,
            )
        )
    for t in rows:
        flag = "included" if t.included else "excluded"
        click.echo(f"{t.task_id}: {t.n_total} patients ({t.n_positive}+/{t.n_negative}-) {flag}")
    if out_path:
        from .pipeline import _write_tasks_csv

        _write_tasks_csv(rows, Path(out_path))


@main.command()
@click.option("--task", "task_id", required=True)
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", required=True, type=int)
@click.option("--n-splits", default=5, show_default=True, type=int)
@click.option("--train-frac", default=0.7, show_default=True, type=float)
@click.option("--min-positives", default=MIN_POSITIVES_DEFAULT, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def split(task_id, labels_path, seed, n_splits, train_frac, min_positives, out_dir):
    """Generate the versioned stratified patient-level split manifest."""
    labels = read_labels_csv(labels_path)
    per_patient = patient_labels(labels, task_id)
    if not per_patient:
        raise click.ClickException(f"no label rows for task {task_id}")
    n_pos = sum(per_patient.values())
    task = TaskDefinition(
        task_id=task_id,
        cohort_id=task_id.split(":")[0],
        n_total=len(per_patient),
        n_positive=n_pos,
        n_negative=len(per_patient) - n_pos,
        included=n_pos >= min_positives,
    )
    manifest = make_splits(task, labels, seed, n_splits=n_splits, train_frac=train_frac)
    out = Path(out_dir) / f"{sanitize_task_id(task_id)}.csv"
    write_split_csv(manifest, out)
    click.echo(f"{manifest.manifest_version}: {n_splits} splits over {task.n_total} patients -> {out}")


def _stage_command(stage: str, config_path: str, out_dir: str, data_dir: str | None):
    config = load_run_config(config_path, base_dir=data_dir)
    result = run_pipeline(config, out_dir, progress=click.echo, stages={stage})
    click.echo(f"{stage} complete; {len(result.index.entries)} artifacts indexed")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--data-dir", default=None, type=click.Path(file_okay=False))
def train(config_path, out_dir, data_dir):
    """Train gated-attention models for every (task, encoder) in a run directory."""
    _stage_command("train", config_path, out_dir, data_dir)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--data-dir", default=None, type=click.Path(file_okay=False))
def infer(config_path, out_dir, data_dir):
    """Frozen-weight inference producing predictions and attention exports."""
    _stage_command("infer", config_path, out_dir, data_dir)


@main.command("eval")
@click.option("--predictions", "predictions_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--encoder", "encoder_id", required=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def eval_cmd(predictions_path, encoder_id, out_dir):
    """Compute metrics, calibration, and deltas from a predictions CSV."""
    records = read_predictions_csv(predictions_path)
    out = Path(out_dir)
    for task_id in sorted({r.task_id for r in records}):
        report = build_metric_report(records, task_id, encoder_id)
        stem = f"{sanitize_task_id(task_id)}__{encoder_id}"
        write_metrics_csv([report], out / f"{stem}.metrics.csv")
        write_calibration_csv([report], out / f"{stem}.calibration.csv")
        write_delta_csv([report], out / f"{stem}.deltas.csv")
        write_plots_json(report, out / f"{stem}.plots.json")
        for cell in report.cells:
            click.echo(
                f"{task_id} [{cell.context}/{cell.checkpoint_kind}] "
                f"mean AUROC {cell.mean_auroc:.4f} over {len(cell.aurocs_by_split)} splits"
            )


@main.command()
@click.option("--slide", "raster_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--attention", "attention_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--kind", "checkpoint_kind", default="best_auc", show_default=True)
@click.option("--percentile", default=75.0, show_default=True, type=float)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def overlay(raster_path, manifest_path, attention_path, checkpoint_kind, percentile, out_path):
    """Render the top-percentile attention overlay for one slide."""
    from .formats import load_slide_record

    record = load_slide_record(raster_path)
    manifest = read_manifest_csv(manifest_path)
    exports = [e for e in read_attention_csv(attention_path) if e.checkpoint_kind == checkpoint_kind]
    if not exports:
        raise click.ClickException(f"no attention rows of kind {checkpoint_kind!r}")
    export_attention_overlay(record, manifest, exports[0], percentile, out_path)
    click.echo(f"overlay -> {out_path}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--data-dir", default=None, type=click.Path(file_okay=False))
@click.option("--quiet", is_flag=True)
def run(config_path, out_dir, data_dir, quiet):
    """Execute the full pipeline (resumable; unchanged stages are skipped)."""
    config = load_run_config(config_path, base_dir=data_dir)
    result = run_pipeline(config, out_dir, progress=None if quiet else click.echo)
    executed = sum(1 for a in result.actions if a["action"] == "executed")
    skipped = sum(1 for a in result.actions if a["action"] == "skipped")
    click.echo(
        f"run complete: {executed} units executed, {skipped} skipped, "
        f"{len(result.index.entries)} artifacts indexed -> {result.run_dir / 'index.json'}"
    )
    for slide_id, reason in sorted(result.exclusions.items()):
        click.echo(f"excluded {slide_id}: {reason}")


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--bind", default="127.0.0.1:8080", show_default=True)
@click.option("--reindex", is_flag=True, help="Rebuild the index before serving")
def serve(run_dir, bind, reindex):
    """Serve the run's artifact catalog over read-only HTTP."""
    from .server import serve as serve_index

    if reindex:
        index = build_index(run_dir)
        write_index(index)
    else:
        index = read_index(run_dir)
    missing = [e.path for e in index.entries if not (Path(run_dir) / e.path).exists()]
    if missing:
        raise click.ClickException(f"indexed artifacts missing on disk: {missing[:5]}")
    serve_index(index, bind)


def cli_main():
    try:
        main(standalone_mode=True)
    except GoldmarkError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    cli_main()
