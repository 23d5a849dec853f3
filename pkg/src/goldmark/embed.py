"""Per-slide embedding production and QC summary statistics.

Two routes produce the canonical ``.emb`` artifact: a deterministic stub
encoder for desk-scale runs (seeded pseudo-random projection of each tile's
downsampled grayscale patch), and ingestion of externally computed raw
tensors. Row i of the tensor always corresponds to manifest row i.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyArtifactError,
    EncoderMismatchError,
    FormatError,
    ManifestMismatchError,
)
from .formats import (
    EmbeddingArtifact,
    EmbeddingMetadata,
    SlideRecord,
    TileManifest,
    artifact_checksum,
    utc_now_iso,
)
from .tiler import block_average, load_raster, _luminance

STUB_PATCH_SIDE = 16
NEAR_DUPLICATE_PAIRS = 1024
NEAR_DUPLICATE_COSINE = 0.999
LOW_VARIANCE_REL_THRESHOLD = 1e-6
_PAIR_SAMPLING_SEED = 0x60DD  # fixed so metadata is reproducible bit-for-bit


@dataclass(frozen=True)
class EncoderSpec:
    """Identity and output dimensionality of a tile encoder."""

    encoder_id: str
    dim: int
    kind: str = "stub"  # stub | ingested
    version: str = "1"

    def __post_init__(self):
        if self.dim < 1:
            raise EncoderMismatchError(f"encoder dim must be >= 1, got {self.dim}")
        if self.kind not in ("stub", "ingested"):
            raise EncoderMismatchError(f"unknown encoder kind {self.kind!r}")


def _derive_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _projection_matrix(spec: EncoderSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(_derive_seed("stub-projection", spec.encoder_id, spec.version, seed))
    n_in = STUB_PATCH_SIDE * STUB_PATCH_SIDE
    return rng.standard_normal((n_in, spec.dim)) / np.sqrt(n_in)


def _resize_area(patch: np.ndarray, side: int) -> np.ndarray:
    """Exact area-average resize of a square patch to side x side."""
    h, w = patch.shape
    out = np.empty((side, side), dtype=np.float64)
    # fractional-overlap weights, same scheme as tile tissue fractions
    def weights(n_src: int) -> list[tuple[int, int, np.ndarray]]:
        spans = []
        scale = n_src / side
        for i in range(side):
            a, b = i * scale, (i + 1) * scale
            lo, hi = int(np.floor(a)), min(int(np.ceil(b)), n_src)
            idx = np.arange(lo, hi, dtype=np.float64)
            spans.append((lo, hi, np.clip(np.minimum(idx + 1, b) - np.maximum(idx, a), 0, None)))
        return spans

    row_spans = weights(h)
    col_spans = weights(w)
    for i, (r0, r1, wr) in enumerate(row_spans):
        band = wr @ patch[r0:r1, :]
        for j, (c0, c1, wc) in enumerate(col_spans):
            out[i, j] = band[c0:c1] @ wc
    cell_area = (h / side) * (w / side)
    return out / cell_area


def stub_encode(
    slide: SlideRecord, manifest: TileManifest, spec: EncoderSpec, seed: int
) -> EmbeddingArtifact:
    """Deterministic desk-scale encoder: project each tile's 16x16 grayscale patch.

    The projection matrix is fixed by (encoder_id, version, seed), so the same
    inputs always produce a bit-identical artifact, and identical tiles map to
    identical embedding rows.
    """
    if spec.kind != "stub":
        raise EncoderMismatchError(f"stub_encode requires a stub encoder, got kind={spec.kind!r}")
    if manifest.slide_id != slide.slide_id:
        raise ManifestMismatchError(
            f"manifest belongs to {manifest.slide_id!r}, slide is {slide.slide_id!r}"
        )
    gray = _luminance(load_raster(slide).astype(np.float64) / 255.0)
    projection = _projection_matrix(spec, seed)
    tensor = np.empty((len(manifest.rows), spec.dim), dtype=np.float32)
    t = manifest.tile_px
    for i, row in enumerate(manifest.rows):
        patch = gray[row.y : row.y + t, row.x : row.x + t]
        features = _resize_area(patch, STUB_PATCH_SIDE).ravel()
        tensor[i] = (features @ projection).astype(np.float32)
    return EmbeddingArtifact(
        slide_id=slide.slide_id,
        encoder_id=spec.encoder_id,
        encoder_version=spec.version,
        tensor=tensor,
    )


def ingest_embeddings(
    raw_path: Path | str, manifest: TileManifest, spec: EncoderSpec
) -> EmbeddingArtifact:
    """Wrap an externally computed raw tensor into the canonical format.

    The raw file is headerless little-endian float32, row-major, with the
    dimension supplied by the encoder spec. The row count is recorded as-is;
    agreement with the manifest is the qc module's job, not silently fixed here.
    """
    raw_path = Path(raw_path)
    data = np.fromfile(raw_path, dtype="<f4")
    if data.size == 0 or data.size % spec.dim != 0:
        raise FormatError(
            f"{raw_path}: {data.size} float32 values do not form rows of dim {spec.dim}"
        )
    tensor = data.reshape(-1, spec.dim)
    return EmbeddingArtifact(
        slide_id=manifest.slide_id,
        encoder_id=spec.encoder_id,
        encoder_version=spec.version,
        tensor=tensor,
    )


def validate_ingest_dim(spec: EncoderSpec, claimed_dim: int) -> None:
    if claimed_dim != spec.dim:
        raise EncoderMismatchError(
            f"raw tensor dim {claimed_dim} conflicts with encoder {spec.encoder_id} dim {spec.dim}"
        )


def _near_duplicate_estimate(tensor: np.ndarray) -> float:
    n = tensor.shape[0]
    if n < 2:
        return 0.0
    rng = np.random.default_rng(_PAIR_SAMPLING_SEED)
    i = rng.integers(0, n, NEAR_DUPLICATE_PAIRS)
    j = (i + rng.integers(1, n, NEAR_DUPLICATE_PAIRS)) % n
    a = tensor[i].astype(np.float64)
    b = tensor[j].astype(np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.einsum("ij,ij->i", a, b) / denom
    both_zero = (na == 0) & (nb == 0)
    cos = np.where(both_zero, 1.0, cos)  # two zero rows are identical
    cos = np.where((denom == 0) & ~both_zero, 0.0, cos)
    return float(np.mean(cos > NEAR_DUPLICATE_COSINE))


def is_low_variance(embedding_variance: float, mean_sq_norm: float, rel: float = LOW_VARIANCE_REL_THRESHOLD) -> bool:
    """Relative low-variance rule: near-constant rows regardless of encoder scale."""
    if not np.isfinite(embedding_variance) or not np.isfinite(mean_sq_norm):
        return False  # non-finite content is flagged via nan/inf fractions instead
    return mean_sq_norm == 0.0 or embedding_variance < rel * mean_sq_norm


def compute_metadata(
    artifact: EmbeddingArtifact,
    timestamp: str | None = None,
    low_variance_rel: float = LOW_VARIANCE_REL_THRESHOLD,
) -> EmbeddingMetadata:
    """Summary statistics for an artifact, plus its canonical checksum.

    ``embedding_variance`` is the mean over dimensions of the per-dimension
    population variance across tiles; norms are Euclidean row norms. The
    near-duplicate estimate samples 1024 tile pairs with a fixed seed, so the
    result is deterministic for a given tensor.
    """
    if artifact.n_tiles == 0:
        raise EmptyArtifactError(f"{artifact.slide_id}: artifact has no tiles")
    x = artifact.tensor.astype(np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        variance = float(np.mean(np.var(x, axis=0)))
        norms = np.sqrt(np.sum(x * x, axis=1))
        mean_sq_norm = float(np.mean(np.sum(x * x, axis=1)))
    nan_fraction = float(np.mean(np.isnan(artifact.tensor)))
    inf_fraction = float(np.mean(np.isinf(artifact.tensor)))

    if nan_fraction > 0 or inf_fraction > 0:
        # degenerate content; the closed status enum folds it into the variance flag
        status = "flagged_low_variance"
    elif is_low_variance(variance, mean_sq_norm, low_variance_rel):
        status = "flagged_low_variance"
    else:
        status = "pass"

    return EmbeddingMetadata(
        slide_id=artifact.slide_id,
        encoder_id=artifact.encoder_id,
        encoder_version=artifact.encoder_version,
        extraction_timestamp=timestamp if timestamp is not None else utc_now_iso(),
        checksum=artifact.checksum or artifact_checksum(artifact),
        n_tiles=artifact.n_tiles,
        dim=artifact.dim,
        embedding_variance=variance,
        norm_min=float(np.min(norms)),
        norm_max=float(np.max(norms)),
        nan_fraction=nan_fraction,
        inf_fraction=inf_fraction,
        near_duplicate_estimate=_near_duplicate_estimate(x),
        qc_status=status,
    )
