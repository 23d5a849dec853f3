"""Exception taxonomy shared across the pipeline.

Every failure the pipeline treats as fail-closed maps to a distinct class so
callers can react to the specific condition instead of parsing messages.
"""


class GoldmarkError(Exception):
    """Base class for all pipeline errors."""


# --- artifact formats ---------------------------------------------------

class FormatError(GoldmarkError):
    """An artifact on disk does not conform to its format contract."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(FormatError):
    """File declares a format version this build cannot read."""


class ChecksumMismatchError(FormatError):
    """Recomputed digest differs from the stored digest."""


class TruncatedPayloadError(FormatError):
    """Payload is shorter than the header claims (partial extraction)."""


class ManifestParseError(FormatError):
    """A CSV manifest is malformed (missing column, bad value, bad order)."""


class InvalidRecordError(GoldmarkError):
    """A domain record violates its invariants (e.g. implausible mpp)."""


# --- tiling --------------------------------------------------------------

class InvalidResolutionError(GoldmarkError):
    """Non-positive or implausible microns-per-pixel value."""


class DegenerateHistogramError(GoldmarkError):
    """Histogram has fewer than two occupied bins; no threshold exists."""


class UnreadableRasterError(GoldmarkError):
    """Slide raster could not be opened or decoded."""


class ThumbnailTooSmallError(GoldmarkError):
    """Thumbnail below the minimum size for tissue detection."""


class SlideRejectedError(GoldmarkError):
    """Slide fails cohort inclusion (e.g. insufficient tissue area)."""


# --- embedding -----------------------------------------------------------

class EncoderMismatchError(GoldmarkError):
    """Tensor dimensionality or encoder kind conflicts with the spec'd encoder."""


class ManifestMismatchError(GoldmarkError):
    """Tile manifest does not belong to the slide it is used with."""


class EmptyArtifactError(GoldmarkError):
    """Embedding artifact has zero tiles."""


# --- cohort / splits -----------------------------------------------------

class UnknownSlideError(GoldmarkError):
    """Label row references a slide that is not in the cohort."""


class UnsplittableTaskError(GoldmarkError):
    """A label class has too few patients to partition."""


# --- model ---------------------------------------------------------------

class DimensionMismatchError(GoldmarkError):
    """Bag feature dimension differs from the model's input dimension."""


class NonFiniteBagError(GoldmarkError):
    """Bag contains NaN/Inf values; upstream QC should have excluded it."""


class MissingArtifactError(GoldmarkError):
    """Required slide artifacts are absent; run refuses to start."""

    def __init__(self, slide_ids, message=None):
        self.slide_ids = sorted(slide_ids)
        super().__init__(message or f"missing artifacts for slides: {', '.join(self.slide_ids)}")


# --- qc / evaluation -----------------------------------------------------

class InsufficientSharedSlidesError(GoldmarkError):
    """Fewer than three slides shared across encoders."""


class UndefinedCorrelationError(GoldmarkError):
    """A variance vector is constant; Pearson r is undefined."""


class UndefinedAurocError(GoldmarkError):
    """Predictions contain a single class; AUROC is undefined."""


class IncompleteCoverageError(GoldmarkError):
    """Metric table is missing a (task, encoder) cell."""


class AlignmentError(GoldmarkError):
    """Attention rows do not align with the tile manifest."""
