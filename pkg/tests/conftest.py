import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from goldmark import pipeline, synthetic
from goldmark.formats import EmbeddingArtifact


@pytest.fixture(scope="session")
def cohort_dir(tmp_path_factory) -> Path:
    """6-slide synthetic cohort with labels and a demo run config."""
    root = tmp_path_factory.mktemp("cohort")
    synthetic.generate_cohort(root, n_slides=6, seed=7)
    synthetic.write_demo_config(root)
    return root


@pytest.fixture(scope="session")
def demo_run(cohort_dir, tmp_path_factory):
    """One full pipeline run over the synthetic cohort, shared read-only."""
    run_dir = tmp_path_factory.mktemp("run") / "demo"
    config = pipeline.load_run_config(cohort_dir / "run.toml")
    result = pipeline.run_pipeline(config, run_dir)
    return {"config": config, "config_path": cohort_dir / "run.toml", "result": result}


def make_artifact(n=5, d=4, seed=0, slide_id="S1", encoder_id="stub-v1") -> EmbeddingArtifact:
    rng = np.random.default_rng(seed)
    return EmbeddingArtifact(
        slide_id=slide_id,
        encoder_id=encoder_id,
        encoder_version="1",
        tensor=rng.standard_normal((n, d)).astype(np.float32),
    )
