"""Shared fixtures: seeded generators, a tiny synthetic manifest and tiny run configurations."""

from pathlib import Path

import numpy as np
import pytest
import torch

from api.config import RunConfig, load_config
from api.services.data_pipeline import (
    Manifest,
    SampleRecord,
    SyntheticConfig,
    _render_sample,
    load_manifest,
    save_manifest,
)

TINY_IMAGE = 16
TINY_SAMPLES = 24


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def generator() -> torch.Generator:
    return torch.Generator().manual_seed(0)


def write_balanced_dataset(out_dir: Path, num_samples: int = TINY_SAMPLES, image_size: int = TINY_IMAGE) -> Manifest:
    """
    Alternating positive/negative samples; every second pair is train, the rest
    alternate between val and test, so each split holds both polarities.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    cfg = SyntheticConfig(num_samples=num_samples, image_size=image_size, seed=0)
    draw = np.random.default_rng(0)
    records = []
    for i in range(num_samples):
        image, report, labels = _render_sample(draw, cfg, positive=i % 2 == 0)
        pair = i // 2
        split = "train" if pair % 2 == 0 else ("val" if pair % 4 == 1 else "test")
        rel = f"images/t{i:03d}.npy"
        np.save(out_dir / rel, image)
        records.append(SampleRecord(f"t{i:03d}", rel, report, labels, split))
    manifest = Manifest(records=records, metadata={"seed": "0", "samples": str(num_samples)})
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory) -> Path:
    out_dir = tmp_path_factory.mktemp("tiny_data")
    write_balanced_dataset(out_dir)
    return out_dir


@pytest.fixture
def tiny_manifest(tiny_data_dir) -> Manifest:
    return load_manifest(tiny_data_dir / "manifest.tsv")


def tiny_overrides(data_dir: Path, output_dir: Path) -> dict:
    return {
        "data.data_dir": str(data_dir),
        "data.image_size": TINY_IMAGE,
        "model.embed_dim": 32,
        "model.decoder_layers": 1,
        "model.decoder_d_state": 4,
        "context.n_pairs": 2,
        "train.epochs": 2,
        "train.batch_size": 4,
        "train.learning_rate": 3e-3,
        "generate.beam_width": 2,
        "generate.max_len": 8,
        "output_dir": str(output_dir),
    }


@pytest.fixture
def tiny_config(tiny_data_dir, tmp_path) -> RunConfig:
    return load_config(overrides=tiny_overrides(tiny_data_dir, tmp_path / "run"))


@pytest.fixture(scope="session")
def trained_run(tiny_data_dir, tmp_path_factory):
    """A tiny model trained once per session: (config, TrainResult)."""
    from api.services.engine import cmd_train

    config = load_config(overrides=tiny_overrides(tiny_data_dir, tmp_path_factory.mktemp("trained")))
    return config, cmd_train(config)
