import json
from pathlib import Path

import numpy as np
import pytest

from ripelab.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """6 berries x 5 frames at 240x320: fast enough for per-test pipelines."""
    out = tmp_path_factory.mktemp("synth_small")
    config = SynthConfig(n_berries=6, n_frames=5, image_size=(240, 320), seed=3)
    dataset = generate(config, out)
    return dataset


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The full 14-berry, 27-frame series used by the acceptance gate."""
    out = tmp_path_factory.mktemp("synth_default")
    dataset = generate(SynthConfig(), out)
    return dataset


@pytest.fixture(scope="session")
def umap_warm():
    """Trigger the one-off JIT compile so timed tests measure the algorithm."""
    from ripelab.embed import UmapParams, umap_embed

    rng = np.random.default_rng(0)
    umap_embed(rng.normal(size=(12, 4)), UmapParams(n_neighbors=3, n_epochs=5), seed=0)


def load_truth(dataset) -> dict:
    return json.loads(Path(dataset.truth_path).read_text(encoding="utf-8"))
