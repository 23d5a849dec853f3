"""Deterministic synthetic fixtures: desk-scale cohorts and planted-signal bags.

The synthetic cohort stands in for scanned slides: white background, textured
darker tissue blobs (texture keeps them above the low-variance suppression
threshold at thumbnail scale), an optional saturated pen stroke, a resolution
sidecar per slide, and a binary label manifest. Everything is a pure function
of the seed.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .formats import (
    LabelManifest,
    LabelRow,
    SlideRecord,
    atomic_write,
    write_labels_csv,
    write_res_sidecar,
)
from .gma import Bag

TISSUE_RGB = (200, 120, 180)  # H&E-ish pink/purple, low saturation
PEN_RGB = (30, 60, 230)  # saturated blue marker
BACKGROUND_LEVEL = 245
NOISE_AMPLITUDE = 25


def synthetic_slide_array(
    rng: np.random.Generator,
    width: int = 1280,
    height: int = 1280,
    n_extra_blobs: int = 3,
    pen_stroke: bool = False,
) -> np.ndarray:
    """RGB uint8 slide: central tissue blob, smaller satellites, optional pen."""
    img = np.full((height, width, 3), BACKGROUND_LEVEL, dtype=np.float64)
    yy, xx = np.mgrid[0:height, 0:width]

    def add_blob(cx, cy, radius):
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
        for c in range(3):
            img[..., c][inside] = TISSUE_RGB[c]

    add_blob(width / 2, height / 2, 0.42 * min(width, height))
    for _ in range(n_extra_blobs):
        cx = rng.uniform(0.15, 0.85) * width
        cy = rng.uniform(0.15, 0.85) * height
        add_blob(cx, cy, rng.uniform(0.10, 0.18) * min(width, height))

    if pen_stroke:
        x0 = int(0.05 * width)
        stroke = (xx >= x0) & (xx < x0 + max(8, width // 40))
        for c in range(3):
            img[..., c][stroke] = PEN_RGB[c]

    noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=img.shape)
    return np.clip(img + noise, 0, 255).astype(np.uint8)


def generate_cohort(
    out_dir: Path | str,
    n_slides: int = 6,
    seed: int = 7,
    width: int = 1280,
    height: int = 1280,
    mpp: float = 0.5,
    cohort_id: str = "SYN",
    task_id: str = "SYN:GENE1",
    pen_on_first: bool = True,
) -> tuple[list[SlideRecord], LabelManifest]:
    """Write a synthetic cohort (rasters, sidecars, labels.csv) and return it.

    Slides alternate positive/negative labels, one patient per slide, so a
    6-slide cohort carries 3 positive and 3 negative patients.
    """
    out_dir = Path(out_dir)
    slides_dir = out_dir / "slides"
    slides_dir.mkdir(parents=True, exist_ok=True)
    records = []
    label_rows = []
    for i in range(n_slides):
        rng = np.random.default_rng([seed, i])
        slide_id = f"S{i + 1:03d}"
        patient_id = f"P{i + 1:03d}"
        arr = synthetic_slide_array(
            rng, width=width, height=height, pen_stroke=pen_on_first and i == 0
        )
        raster = slides_dir / f"{slide_id}.png"
        with atomic_write(raster, "wb") as fh:
            Image.fromarray(arr).save(fh, format="PNG")
        record = SlideRecord(
            slide_id=slide_id,
            patient_id=patient_id,
            cohort_id=cohort_id,
            mpp=mpp,
            width_px=width,
            height_px=height,
            source_path=raster,
        )
        write_res_sidecar(record)
        records.append(record)
        label_rows.append(
            LabelRow(
                patient_id=patient_id,
                slide_id=slide_id,
                task_id=task_id,
                label=i % 2,
                evidence_level="L1",
            )
        )
    labels = LabelManifest(rows=label_rows)
    write_labels_csv(labels, out_dir / "labels.csv")
    return records, labels


DEMO_CONFIG_TEMPLATE = """\
# Desk-scale demo pipeline configuration.
[paths]
slides_dir = "slides"
labels = "labels.csv"

[cohort]
cohort_id = "{cohort_id}"
min_positives = 3
seed = 7
n_splits = 5
train_frac = 0.7

[tiling]
field_of_view_um = 128.0
stride_gap_px = 1
min_fraction_tissue = 0.5
gaussian_sigma_px = 2.0
min_tissue_area_mm2 = 0.05   # synthetic slides are far below cohort scale

[training]
epochs = 120
attention_dim = 64
learning_rate = 1e-4
weight_decay = 1e-5
seed = 0

[qc]
low_variance_rel = 1e-6

[[encoders]]
encoder_id = "stub-v1"
dim = 48
kind = "stub"
seed = 11
"""


def write_demo_config(out_dir: Path | str, cohort_id: str = "SYN") -> Path:
    out_dir = Path(out_dir)
    path = out_dir / "run.toml"
    with atomic_write(path, "w") as fh:
        fh.write(DEMO_CONFIG_TEMPLATE.format(cohort_id=cohort_id))
    return path


def planted_bags(
    n_bags: int = 200,
    tiles_per_bag: int = 50,
    dim: int = 32,
    signal_fraction: float = 0.2,
    signal_strength: float = 3.0,
    seed: int = 0,
    permute_labels: bool = False,
) -> dict[str, Bag]:
    """Bags with a planted feature direction in positive bags' signal tiles.

    Negative bags are isotropic noise; in positive bags a fixed fraction of
    tiles is shifted along a fixed unit direction. With ``permute_labels`` the
    labels are shuffled after generation (same features), giving a null task.
    """
    rng = np.random.default_rng([seed, 0])
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    true_labels = np.array([i % 2 for i in range(n_bags)])
    supervision = true_labels
    if permute_labels:
        # same features, shuffled supervision: the association is destroyed
        supervision = np.random.default_rng([seed, 1]).permutation(true_labels)
    bags = {}
    for i in range(n_bags):
        features = rng.standard_normal((tiles_per_bag, dim))
        if true_labels[i] == 1:
            n_signal = max(1, int(math.floor(signal_fraction * tiles_per_bag)))
            features[:n_signal] += signal_strength * direction
        slide_id = f"B{i + 1:04d}"
        bags[slide_id] = Bag(
            slide_id=slide_id,
            patient_id=f"Q{i + 1:04d}",
            label=int(supervision[i]),
            features=features.astype(np.float32),
        )
    return bags
