import math

import numpy as np
import pytest
from PIL import Image

from oracles import otsu_bruteforce
from goldmark import formats, tiler
from goldmark.errors import (
    DegenerateHistogramError,
    InvalidResolutionError,
    SlideRejectedError,
    ThumbnailTooSmallError,
)
from goldmark.formats import SlideRecord, write_res_sidecar
from goldmark.tiler import (
    ARTIFACT,
    TISSUE,
    TilingConfig,
    TissueMask,
    detect_tissue,
    fraction_tissue,
    otsu_threshold,
    render_overlay,
    tile_px_for,
    tile_slide,
)


def _full_mask(width_px, height_px, ds=2, value=TISSUE) -> TissueMask:
    shape = (math.ceil(height_px / ds), math.ceil(width_px / ds))
    return TissueMask(classes=np.full(shape, value, dtype=np.uint8), downscale=ds)


def _slide(tmp_path, slide_id="S1", width=1024, height=1024, mpp=0.5, array=None):
    raster = tmp_path / f"{slide_id}.png"
    if array is None:
        array = np.full((height, width, 3), 240, dtype=np.uint8)
    height, width = array.shape[:2]
    Image.fromarray(array).save(raster)
    record = SlideRecord(
        slide_id=slide_id, patient_id="P1", cohort_id="C", mpp=mpp,
        width_px=width, height_px=height, source_path=raster,
    )
    write_res_sidecar(record)
    return record


# ---------------------------------------------------------------------------
# tile size formula

def test_tile_px_matches_stated_resolutions():
    assert tile_px_for(0.50, 128.0) == 256
    assert tile_px_for(0.25, 128.0) == 512
    assert tile_px_for(1.00, 128.0) == 128


def test_tile_px_rounds_half_away_from_zero():
    # 2.5 px would round to 2 under banker's rounding; the contract says 3
    assert tile_px_for(1.0, 2.5) == 3
    assert tile_px_for(256.0, 128.0) == 1  # 0.5 rounds up, never to zero


def test_tile_px_rejects_bad_resolution():
    with pytest.raises(InvalidResolutionError):
        tile_px_for(0.0)
    with pytest.raises(InvalidResolutionError):
        tile_px_for(-0.5)


# ---------------------------------------------------------------------------
# Otsu threshold

def test_otsu_bimodal_tie_breaks_low():
    hist = np.zeros(256)
    hist[10], hist[200] = 40, 60
    assert otsu_threshold(hist) == 10
    assert otsu_bruteforce(hist) == 10


def test_otsu_uniform_histogram_splits_in_half():
    hist = np.ones(256)
    assert otsu_threshold(hist) == 127
    assert otsu_bruteforce(hist) == 127


def test_otsu_matches_bruteforce_oracle():
    rng = np.random.default_rng(17)
    for _ in range(200):
        hist = rng.integers(0, 50, size=256)
        if (hist > 0).sum() < 2:
            hist[[3, 200]] = 5
        assert otsu_threshold(hist) == otsu_bruteforce(hist)


def test_otsu_degenerate_histogram_errors():
    hist = np.zeros(256)
    hist[128] = 1000
    with pytest.raises(DegenerateHistogramError):
        otsu_threshold(hist)
    with pytest.raises(ValueError):
        otsu_threshold(np.ones(100))


# ---------------------------------------------------------------------------
# tissue detection

def _disk_slide(tmp_path, radius=300, noise=40, pen=False):
    rng = np.random.default_rng(5)
    w = h = 1024
    img = np.full((h, w, 3), 245.0)
    yy, xx = np.mgrid[0:h, 0:w]
    inside = (xx - 512) ** 2 + (yy - 512) ** 2 <= radius**2
    for c, v in enumerate((200, 120, 180)):
        img[..., c][inside] = v
    if pen:
        stroke = (xx >= 40) & (xx < 72)
        for c, v in enumerate((30, 60, 230)):
            img[..., c][stroke] = v
    img = np.clip(img + rng.uniform(-noise, noise, img.shape), 0, 255).astype(np.uint8)
    return _slide(tmp_path, slide_id="DISK", array=img), inside


def test_detect_tissue_recovers_disk(tmp_path):
    record, _ = _disk_slide(tmp_path)
    mask = detect_tissue(record, TilingConfig())
    ds = mask.downscale
    ty, tx = np.mgrid[0 : mask.classes.shape[0], 0 : mask.classes.shape[1]]
    dist = np.sqrt(((tx + 0.5) * ds - 512) ** 2 + ((ty + 0.5) * ds - 512) ** 2)
    interior = dist <= 300 - 2 * ds  # analytic membership, one-ish pixel slack
    exterior = dist >= 300 + 2 * ds
    assert int((~mask.tissue & interior).sum()) <= 2
    assert int((mask.tissue & exterior).sum()) == 0


def test_detect_tissue_classes_pen_as_artifact(tmp_path):
    record, _ = _disk_slide(tmp_path, pen=True)
    mask = detect_tissue(record, TilingConfig())
    ds = mask.downscale
    stroke_cols = slice(int(44 / ds), int(68 / ds))  # interior of the stroke
    stroke = mask.classes[:, stroke_cols]
    assert (stroke == ARTIFACT).mean() > 0.9
    assert not (stroke == TISSUE).any()


def test_detect_tissue_all_white_gives_empty_mask(tmp_path):
    record = _slide(tmp_path, slide_id="WHITE", array=np.full((512, 512, 3), 255, np.uint8))
    mask = detect_tissue(record, TilingConfig())
    assert not mask.tissue.any()


def test_detect_tissue_rejects_tiny_thumbnails(tmp_path):
    record = _slide(tmp_path, slide_id="TINY", width=24, height=24)
    with pytest.raises(ThumbnailTooSmallError):
        detect_tissue(record, TilingConfig())


def test_detect_tissue_deterministic(tmp_path):
    record, _ = _disk_slide(tmp_path)
    a = detect_tissue(record, TilingConfig())
    b = detect_tissue(record, TilingConfig())
    assert np.array_equal(a.classes, b.classes)
    assert a.downscale == b.downscale


# ---------------------------------------------------------------------------
# grid placement

def _cfg(**kw):
    defaults = dict(min_tissue_area_mm2=0.0)
    defaults.update(kw)
    return TilingConfig(**defaults)


def test_nine_tile_grid_on_1024_fixture(tmp_path):
    record = _slide(tmp_path, width=1024, height=1024, mpp=0.5)
    manifest = tile_slide(record, _full_mask(1024, 1024), _cfg())
    assert manifest.tile_px == 256
    coords = [(r.x, r.y) for r in manifest.rows]
    expected = [(x, y) for y in (0, 257, 514) for x in (0, 257, 514)]
    assert coords == expected  # row-major, stride 257
    assert all(r.fraction_tissue == 1.0 for r in manifest.rows)


def test_all_background_slide_rejected_at_default_area(tmp_path):
    record = _slide(tmp_path, width=1024, height=1024, mpp=0.5)
    mask = _full_mask(1024, 1024, value=0)
    with pytest.raises(SlideRejectedError):
        tile_slide(record, mask, TilingConfig())  # default 25 mm^2 minimum


def test_full_tissue_desk_slide_still_below_cohort_area(tmp_path):
    # a 1024 px slide at 0.5 um/px holds ~0.26 mm^2 of tissue: cohort rule rejects it
    record = _slide(tmp_path, width=1024, height=1024, mpp=0.5)
    with pytest.raises(SlideRejectedError):
        tile_slide(record, _full_mask(1024, 1024), TilingConfig())


def test_half_tissue_slide_keeps_columns_by_fraction(tmp_path):
    record = _slide(tmp_path, width=1024, height=1024, mpp=0.5)
    mask = _full_mask(1024, 1024, value=0)
    mask.classes[:, :256] = TISSUE  # left half in thumbnail space
    manifest = tile_slide(record, mask, _cfg())
    by_column = {}
    for row in manifest.rows:
        by_column.setdefault(row.x, set()).add(row.fraction_tissue)
    # column 0 fully covered; column 257 covers thumb [128.5, 256.5) -> 127.5/128
    assert set(by_column) == {0, 257}
    assert by_column[0] == {1.0}
    assert by_column[257] == {127.5 / 128.0}


def test_fraction_tissue_is_area_weighted(tmp_path):
    mask = _full_mask(1024, 1024, value=0)
    mask.classes[:, :128] = TISSUE  # native x < 256
    # tile [0,256): fully tissue; tile [257,513): no tissue
    assert fraction_tissue(mask, 0, 0, 256) == 1.0
    assert fraction_tissue(mask, 257, 0, 256) == 0.0
    # tile straddling the edge: native [128,384) -> thumb [64,192), half tissue
    assert fraction_tissue(mask, 128, 0, 256) == 0.5


def test_manifest_pure_function_of_inputs(tmp_path):
    record, _ = _disk_slide(tmp_path)
    cfg = _cfg()
    m1 = tile_slide(record, detect_tissue(record, cfg), cfg)
    m2 = tile_slide(record, detect_tissue(record, cfg), cfg)
    assert m1 == m2
    p1, p2 = tmp_path / "m1.csv", tmp_path / "m2.csv"
    formats.write_manifest_csv(m1, p1)
    formats.write_manifest_csv(m2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_random_slides_no_out_of_bounds_no_overlap(tmp_path):
    rng = np.random.default_rng(23)
    for trial in range(25):
        width = int(rng.integers(300, 1600))
        height = int(rng.integers(300, 1600))
        mpp = float(rng.choice([0.25, 0.5, 0.73, 1.0]))
        ds = 2
        shape = (math.ceil(height / ds), math.ceil(width / ds))
        classes = (rng.random(shape) < 0.7).astype(np.uint8)
        mask = TissueMask(classes=classes, downscale=ds)
        record = SlideRecord(
            slide_id=f"R{trial}", patient_id="P", cohort_id="C", mpp=mpp,
            width_px=width, height_px=height, source_path=tmp_path / "none.png",
        )
        manifest = tile_slide(record, mask, _cfg(min_fraction_tissue=0.3))
        t = manifest.tile_px
        stride = t + 1
        assert stride > t
        for row in manifest.rows:
            assert 0 <= row.x and row.x + t <= width
            assert 0 <= row.y and row.y + t <= height
            assert row.x % stride == 0 and row.y % stride == 0
        coords = {(r.x, r.y) for r in manifest.rows}
        assert len(coords) == len(manifest.rows)


def test_resolution_invariance_of_tile_centers(tmp_path):
    # same physical scene at 0.25 and 0.50 um/px: centers agree within one 0.5-mpp pixel
    rec_50 = _slide(tmp_path, slide_id="A50", width=1024, height=1024, mpp=0.5)
    rec_25 = _slide(tmp_path, slide_id="A25", width=2048, height=2048, mpp=0.25)
    m50 = tile_slide(rec_50, _full_mask(1024, 1024), _cfg())
    m25 = tile_slide(rec_25, _full_mask(2048, 2048), _cfg())
    assert len(m50.rows) == len(m25.rows) == 9
    for a, b in zip(m50.rows, m25.rows):
        cx50 = (a.x + m50.tile_px / 2) * 0.5
        cy50 = (a.y + m50.tile_px / 2) * 0.5
        cx25 = (b.x + m25.tile_px / 2) * 0.25
        cy25 = (b.y + m25.tile_px / 2) * 0.25
        assert abs(cx50 - cx25) <= 0.5 and abs(cy50 - cy25) <= 0.5


# ---------------------------------------------------------------------------
# overlays

def test_overlay_draws_rectangle_corners(tmp_path):
    record = _slide(tmp_path, width=1024, height=1024, mpp=0.5)
    manifest = tile_slide(record, _full_mask(1024, 1024), _cfg())
    out = render_overlay(record, manifest, tmp_path / "ov.png")
    img = np.asarray(Image.open(out))
    green = np.array(tiler.OVERLAY_COLOR)
    hits = 0
    for row in manifest.rows:
        x0, y0 = row.x // 2, row.y // 2
        if (img[y0, x0] == green).all():
            hits += 1
    assert hits == 9


def test_overlay_empty_manifest_is_bare_thumbnail(tmp_path):
    record = _slide(tmp_path, width=512, height=512, mpp=0.5)
    manifest = formats.TileManifest(slide_id="S1", mpp=0.5, tile_px=128, rows=[])
    out = render_overlay(record, manifest, tmp_path / "bare.png")
    img = np.asarray(Image.open(out))
    assert not (img == np.array(tiler.OVERLAY_COLOR)).all(axis=-1).any()


def test_overlay_byte_identical_across_runs(tmp_path):
    record = _slide(tmp_path, width=1024, height=1024, mpp=0.5)
    manifest = tile_slide(record, _full_mask(1024, 1024), _cfg())
    a = render_overlay(record, manifest, tmp_path / "a.png")
    b = render_overlay(record, manifest, tmp_path / "b.png")
    assert a.read_bytes() == b.read_bytes()
