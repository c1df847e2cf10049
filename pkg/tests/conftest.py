"""Shared fixtures: deterministic desk-scale datasets built from the stub renderer."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from mathscribe.fixtures import load_sample_corpus
from mathscribe.prepare import prepare_rendered_dataset, prepare_synthetic_handwritten
from mathscribe.rendering import RenderParams, StubRenderer


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)


@pytest.fixture(scope="session")
def stub():
    return StubRenderer()


@pytest.fixture(scope="session")
def short_records():
    """16 short formulas from the bundled corpus."""
    return [r for r in load_sample_corpus() if 2 <= len(r.tokens) <= 10][:16]


@pytest.fixture(scope="session")
def overfit_records():
    """32 short formulas for memorization runs."""
    return [r for r in load_sample_corpus() if 2 <= len(r.tokens) <= 10][:32]


@pytest.fixture(scope="session")
def gan_data(tmp_path_factory, stub, short_records):
    """Paired rendered/handwritten dataset directories over 16 formulas."""
    root = tmp_path_factory.mktemp("gan_data")
    prepare_rendered_dataset(
        short_records, root / "rendered", stub, seed=11,
        sample_params=False, fixed_params=RenderParams(font_size=24, padding=4),
    )
    prepare_synthetic_handwritten(short_records, root / "handwritten", stub, seed=11, font_size=24)
    return {"rendered": root / "rendered", "handwritten": root / "handwritten"}


@pytest.fixture(scope="session")
def eval_data(tmp_path_factory, stub):
    """Held-out handwritten-style set (8 formulas) for perplexity scoring."""
    records = [r for r in load_sample_corpus() if 2 <= len(r.tokens) <= 10][16:24]
    root = tmp_path_factory.mktemp("eval_data")
    prepare_synthetic_handwritten(records, root / "heldout", stub, seed=23, font_size=24)
    return root / "heldout"


@pytest.fixture(scope="session")
def tiny_gan_checkpoint(tmp_path_factory, gan_data):
    """A 4-step tiny GAN run; enough to exercise checkpoint consumers."""
    from mathscribe.config import GANTrainConfig
    from mathscribe.training import train_gan

    out = tmp_path_factory.mktemp("tiny_gan")
    cfg = GANTrainConfig(
        gan_preset="tiny", task_preset="tiny", input_height=32, batch_size=2,
        max_iterations=4, seed=5, lam=1.0, augment_rendered=False, augment_handwritten=False,
        checkpoint_iterations=[2],
    )
    result = train_gan(cfg, gan_data["rendered"], gan_data["handwritten"], out)
    return result


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
