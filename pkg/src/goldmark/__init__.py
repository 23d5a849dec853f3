"""Governed slide-level biomarker modeling toolkit.

Deterministic tiling, checksummed embedding artifacts, gated-attention
multiple-instance learning, fail-closed quality control, and standardized
evaluation, runnable end to end at desk scale.
"""

__version__ = "0.1.0"

PIPELINE_VERSION = f"goldmark/{__version__}"
