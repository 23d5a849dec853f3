import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_artifact
from goldmark import formats
from goldmark.errors import (
    BadMagicError,
    ChecksumMismatchError,
    InvalidRecordError,
    ManifestParseError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from goldmark.formats import (
    EmbeddingArtifact,
    EmbeddingMetadata,
    LabelManifest,
    LabelRow,
    SlideRecord,
    SplitManifest,
    TileManifest,
    TileRow,
    artifact_equal,
    mark_failed,
    meta_path_for,
    read_artifact,
    read_emb_header,
    read_labels_csv,
    read_manifest_csv,
    read_metadata_json,
    read_split_csv,
    write_artifact,
    write_labels_csv,
    write_manifest_csv,
    write_metadata_json,
    write_split_csv,
)

ids = st.text(
    alphabet=st.characters(whitelist_categories=("L", "N"), whitelist_characters="-_."),
    min_size=1,
    max_size=24,
)


# ---------------------------------------------------------------------------
# embedding artifacts

def test_emb_round_trip_is_bit_exact(tmp_path):
    art = make_artifact(n=7, d=5, seed=3)
    digest = write_artifact(art, tmp_path / "a.emb")
    back = read_artifact(tmp_path / "a.emb")
    assert artifact_equal(art, back)
    assert back.checksum == digest
    raw = (tmp_path / "a.emb").read_bytes()
    assert formats.sha256_bytes(raw[:-32]) == digest


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 12),
    d=st.integers(1, 9),
    seed=st.integers(0, 2**31),
    slide_id=ids,
    encoder_id=ids,
)
def test_emb_round_trip_property(tmp_path_factory, n, d, seed, slide_id, encoder_id):
    tmp = tmp_path_factory.mktemp("emb")
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((n, d)).astype(np.float32)
    # sprinkle non-finite values; round trip must preserve exact bits
    if n * d >= 4:
        flat = values.ravel()
        flat[0], flat[-1] = np.nan, np.inf
    art = EmbeddingArtifact(slide_id, encoder_id, "1", values)
    write_artifact(art, tmp / "x.emb", metadata=_minimal_meta(art))
    back = read_artifact(tmp / "x.emb")
    assert artifact_equal(art, back)


def _minimal_meta(art):
    # hand-built sidecar so the property test does not depend on embed stats
    return EmbeddingMetadata(
        slide_id=art.slide_id,
        encoder_id=art.encoder_id,
        encoder_version=art.encoder_version,
        extraction_timestamp="2026-01-01T00:00:00Z",
        checksum=formats.artifact_checksum(art),
        n_tiles=art.n_tiles,
        dim=art.dim,
        embedding_variance=1.0,
        norm_min=0.0,
        norm_max=1.0,
        nan_fraction=0.0,
        inf_fraction=0.0,
        near_duplicate_estimate=0.0,
        qc_status="pass",
    )


def test_emb_header_records_shape(tmp_path):
    art = EmbeddingArtifact("s3", "stub-v1", "1", np.zeros((3, 4), dtype=np.float32))
    write_artifact(art, tmp_path / "z.emb", metadata=_minimal_meta(art))
    header = read_emb_header(tmp_path / "z.emb")
    assert (header.n_tiles, header.dim) == (3, 4)
    assert header.slide_id == "s3"
    assert header.header_size % 64 == 0


def test_single_byte_payload_flip_detected(tmp_path):
    art = make_artifact(n=6, d=6)
    path = tmp_path / "c.emb"
    write_artifact(art, path)
    header = read_emb_header(path)
    raw = bytearray(path.read_bytes())
    raw[header.header_size + 5] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatchError):
        read_artifact(path, verify=True)
    # verify=False parses the (corrupt) payload without complaint
    assert read_artifact(path, verify=False).n_tiles == 6


def test_bad_magic_and_version_are_distinct_errors(tmp_path):
    art = make_artifact()
    path = tmp_path / "d.emb"
    write_artifact(art, path)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "magic.emb"
    corrupted = bytearray(raw)
    corrupted[0] ^= 0xFF
    bad_magic.write_bytes(bytes(corrupted))
    with pytest.raises(BadMagicError):
        read_artifact(bad_magic)

    bad_version = tmp_path / "version.emb"
    corrupted = bytearray(raw)
    corrupted[6] = 99
    bad_version.write_bytes(bytes(corrupted))
    with pytest.raises(UnsupportedVersionError):
        read_artifact(bad_version)


def test_truncation_is_its_own_error(tmp_path):
    art = make_artifact(n=10, d=8)
    path = tmp_path / "t.emb"
    write_artifact(art, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 40])
    with pytest.raises(TruncatedPayloadError):
        read_artifact(path)


def test_random_bit_corruptions_all_detected(tmp_path):
    art = make_artifact(n=8, d=8, seed=11)
    path = tmp_path / "e.emb"
    write_artifact(art, path)
    pristine = path.read_bytes()
    rng = np.random.default_rng(0)
    detected = 0
    trials = 25
    for _ in range(trials):
        raw = bytearray(pristine)
        bit = int(rng.integers(0, len(raw) * 8))
        raw[bit // 8] ^= 1 << (bit % 8)
        path.write_bytes(bytes(raw))
        try:
            read_artifact(path, verify=True)
        except formats.FormatError:
            detected += 1
    assert detected == trials


def test_writer_is_atomic(tmp_path, monkeypatch):
    art = make_artifact()
    path = tmp_path / "f.emb"

    def crash(src, dst):
        raise OSError("injected crash between temp write and rename")

    monkeypatch.setattr(os, "replace", crash)
    with pytest.raises(OSError):
        write_artifact(art, path)
    monkeypatch.undo()
    assert not path.exists()
    assert list(tmp_path.iterdir()) == []  # temp file cleaned up too


def test_write_artifact_emits_sidecar(tmp_path):
    art = make_artifact(n=4, d=3)
    path = tmp_path / "g.emb"
    digest = write_artifact(art, path, timestamp="2026-01-02T03:04:05Z")
    sidecar = meta_path_for(path)
    assert sidecar.name == "g.emb.meta.json"
    meta = read_metadata_json(sidecar)
    assert meta.checksum == digest
    assert meta.n_tiles == 4 and meta.dim == 3
    assert meta.extraction_timestamp == "2026-01-02T03:04:05Z"


def test_mark_failed_renames_artifact_and_sidecar(tmp_path):
    art = make_artifact()
    path = tmp_path / "h.emb"
    write_artifact(art, path)
    failed = mark_failed(path)
    assert failed.name == "h.emb.FAILED"
    assert not path.exists()
    assert (tmp_path / "h.emb.meta.json.FAILED").exists()


# ---------------------------------------------------------------------------
# tile manifest CSV

def _manifest(rows=None):
    rows = rows if rows is not None else [
        TileRow(0, 0, 0, 1.0),
        TileRow(1, 257, 0, 0.75),
    ]
    return TileManifest(slide_id="S7", mpp=0.5, tile_px=256, rows=rows)


def test_manifest_round_trip(tmp_path):
    manifest = _manifest()
    path = tmp_path / "m.csv"
    write_manifest_csv(manifest, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "slide_id,tile_index,x,y,tile_px,mpp,fraction_tissue"
    assert len(lines) == 3  # header + 2 rows
    back = read_manifest_csv(path)
    assert back == manifest


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 30))
def test_manifest_round_trip_property(tmp_path_factory, seed, n):
    rng = np.random.default_rng(seed)
    tile_px, gap = 128, 1
    rows = []
    for i in range(n):
        y = (i // 6) * (tile_px + gap)
        x = (i % 6) * (tile_px + gap)
        rows.append(TileRow(i, x, y, float(np.round(rng.uniform(0, 1), 6))))
    manifest = TileManifest("P", float(rng.choice([0.25, 0.5, 1.0])), tile_px, rows)
    tmp = tmp_path_factory.mktemp("man")
    write_manifest_csv(manifest, tmp / "m.csv")
    assert read_manifest_csv(tmp / "m.csv") == manifest


def test_manifest_rejects_bad_fraction(tmp_path):
    path = tmp_path / "bad.csv"
    write_manifest_csv(_manifest(), path)
    text = path.read_text().replace("0.75", "1.2")
    path.write_text(text)
    with pytest.raises(ManifestParseError):
        read_manifest_csv(path)


def test_manifest_rejects_non_integer_coordinate(tmp_path):
    path = tmp_path / "bad2.csv"
    write_manifest_csv(_manifest(), path)
    path.write_text(path.read_text().replace("257", "257.5"))
    with pytest.raises(ManifestParseError):
        read_manifest_csv(path)


def test_manifest_rejects_missing_column(tmp_path):
    path = tmp_path / "bad3.csv"
    path.write_text("slide_id,tile_index,x,y,tile_px,mpp\nS,0,0,0,256,0.5\n")
    with pytest.raises(ManifestParseError):
        read_manifest_csv(path)


def test_manifest_rejects_noncontiguous_indices():
    with pytest.raises(ManifestParseError):
        _manifest([TileRow(0, 0, 0, 1.0), TileRow(2, 257, 0, 1.0)]).validate()


# ---------------------------------------------------------------------------
# label manifest CSV

def _labels():
    return LabelManifest(
        rows=[
            LabelRow("P1", "S1", "BLCA:FGFR3", 1, "L2"),
            LabelRow("P2", "S2", "BLCA:FGFR3", 0, "L2"),
            LabelRow("P1", "S1", "BLCA:ERBB2", 0, "L3"),
        ]
    )


def test_labels_round_trip(tmp_path):
    labels = _labels()
    write_labels_csv(labels, tmp_path / "l.csv")
    assert read_labels_csv(tmp_path / "l.csv") == labels


def test_labels_reject_duplicates_and_bad_values():
    with pytest.raises(ManifestParseError):
        LabelManifest(
            rows=[LabelRow("P1", "S1", "T:G", 1), LabelRow("P1", "S1", "T:G", 0)]
        ).validate()
    with pytest.raises(ManifestParseError):
        LabelManifest(rows=[LabelRow("P1", "S1", "T:G", 2)]).validate()
    with pytest.raises(ManifestParseError):
        LabelManifest(rows=[LabelRow("P1", "S1", "T:G", 1, "L9")]).validate()


# ---------------------------------------------------------------------------
# split manifest CSV

def _splits(seed=42):
    patients = [f"P{i}" for i in range(10)]
    splits = []
    for k in range(5):
        rng = np.random.default_rng([seed, k])
        order = rng.permutation(10)
        splits.append(
            {patients[i]: ("train" if pos < 7 else "test") for pos, i in enumerate(order)}
        )
    return SplitManifest(task_id="BLCA:FGFR3", seed=seed, splits=splits)


def test_split_round_trip(tmp_path):
    manifest = _splits()
    write_split_csv(manifest, tmp_path / "s.csv")
    back = read_split_csv(tmp_path / "s.csv")
    assert back == manifest
    assert back.manifest_version == "splits-v1-seed42"


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(-5, 2**31), n_patients=st.integers(4, 40), n_splits=st.integers(1, 6))
def test_split_round_trip_property(tmp_path_factory, seed, n_patients, n_splits):
    patients = [f"Q{i}" for i in range(n_patients)]
    rng = np.random.default_rng(abs(seed) + 1)
    splits = []
    for _ in range(n_splits):
        splits.append({p: rng.choice(["train", "test"]) for p in patients})
    manifest = SplitManifest(task_id="T:G", seed=seed, splits=splits)
    tmp = tmp_path_factory.mktemp("split")
    write_split_csv(manifest, tmp / "s.csv")
    assert read_split_csv(tmp / "s.csv") == manifest


def test_split_rejects_inconsistent_patient_sets():
    manifest = SplitManifest(task_id="T:G", seed=0, splits=[{"A": "train"}, {"B": "train"}])
    with pytest.raises(ManifestParseError):
        manifest.validate()


def test_split_rejects_bad_assignment():
    manifest = SplitManifest(task_id="T:G", seed=0, splits=[{"A": "validation"}])
    with pytest.raises(ManifestParseError):
        manifest.validate()


# ---------------------------------------------------------------------------
# metadata sidecar JSON

def test_metadata_round_trip_with_non_finite_values(tmp_path):
    meta = EmbeddingMetadata(
        slide_id="S1",
        encoder_id="stub-v1",
        encoder_version="1",
        extraction_timestamp="2026-01-01T00:00:00Z",
        checksum="ab" * 32,
        n_tiles=3,
        dim=2,
        embedding_variance=float("nan"),
        norm_min=float("nan"),
        norm_max=float("nan"),
        nan_fraction=0.5,
        inf_fraction=0.0,
        near_duplicate_estimate=0.0,
        qc_status="flagged_low_variance",
    )
    write_metadata_json(meta, tmp_path / "m.json")
    payload = json.loads((tmp_path / "m.json").read_text())
    assert payload["embedding_variance"] is None  # JSON carries no NaN
    back = read_metadata_json(tmp_path / "m.json")
    assert np.isnan(back.embedding_variance)
    assert back.nan_fraction == 0.5
    assert back.qc_status == "flagged_low_variance"


def test_metadata_pass_requires_finite_content():
    meta_kwargs = dict(
        slide_id="S1",
        encoder_id="e",
        encoder_version="1",
        extraction_timestamp="2026-01-01T00:00:00Z",
        checksum="00" * 32,
        n_tiles=1,
        dim=1,
        embedding_variance=1.0,
        norm_min=1.0,
        norm_max=1.0,
        near_duplicate_estimate=0.0,
    )
    with pytest.raises(InvalidRecordError):
        EmbeddingMetadata(nan_fraction=0.1, inf_fraction=0.0, qc_status="pass", **meta_kwargs).validate()
    with pytest.raises(InvalidRecordError):
        EmbeddingMetadata(
            nan_fraction=0.0, inf_fraction=0.0, qc_status="pass",
            **{**meta_kwargs, "norm_min": 2.0},
        ).validate()


# ---------------------------------------------------------------------------
# slide records

def test_slide_record_invariants(tmp_path):
    ok = dict(
        slide_id="S1", patient_id="P1", cohort_id="C", mpp=0.5,
        width_px=100, height_px=100, source_path=tmp_path / "s.png",
    )
    SlideRecord(**ok)
    with pytest.raises(InvalidRecordError):
        SlideRecord(**{**ok, "mpp": 0.0})
    with pytest.raises(InvalidRecordError):
        SlideRecord(**{**ok, "mpp": 12.0})
    with pytest.raises(InvalidRecordError):
        SlideRecord(**{**ok, "width_px": 0})
    with pytest.raises(InvalidRecordError):
        SlideRecord(**{**ok, "slide_id": ""})
    with pytest.raises(InvalidRecordError):
        SlideRecord(**{**ok, "preparation": "fresh"})
