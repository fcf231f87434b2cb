import json

import numpy as np
import pytest
import torch

from pathlib import Path
from PIL import Image

import scenepipe.__main__ as cli

from scenepipe.core import Manifest, ManifestRow, TrainConfig
from scenepipe.priors import PriorSet


def write_rgb(path: Path, array: np.ndarray) -> Path:
    """Writes an H×W×3 uint8 array as an image file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array.astype(np.uint8)).save(path)
    return path


def solid(value: int, size: int = 16) -> np.ndarray:
    return np.full((size, size, 3), value, dtype=np.uint8)


def noise(seed: int, size: int = 16) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)


def hand_embedding(projection: torch.Tensor, means: list[float]) -> list[float]:
    """Mock embedder output worked out element by element: [means, 1] · P, unit length."""
    rows = projection.double().tolist()
    homog = [*means, 1.0]
    v = [sum(h * rows[r][c] for r, h in enumerate(homog)) for c in range(len(rows[0]))]
    norm = sum(a * a for a in v) ** 0.5
    return [a / norm for a in v]


@pytest.fixture
def tiny_cfg() -> TrainConfig:
    """Desk-scale config: 16px stage-1 generator, 32px translation model."""
    return TrainConfig(
        gen_blocks=3,
        style_dim=16,
        mapping_depth=2,
        gen_channels=8,
        trainable_blocks=2,
        w_avg_samples=64,
        patch_count_finetune=4,
        patch_size_finetune=8,
        finetune_iters=2,
        n_pairs=4,
        ngf=4,
        ndf=8,
        resolution=32,
        patches_per_layer=16,
        embed_dim=16,
        epochs=2,
    )


@pytest.fixture
def priors() -> PriorSet:
    return PriorSet.mock()


@pytest.fixture
def image_dir(tmp_path: Path) -> Path:
    """Three noise images with names that sort differently by lex and natural order."""
    d = tmp_path / 'images'
    for i, name in enumerate(('frame10.png', 'frame2.png', 'frame1.png')):
        write_rgb(d / name, noise(i, 32))
    return d


@pytest.fixture
def pair_dir(tmp_path: Path) -> Path:
    """A pair dataset with one structurally consistent and one inverted pair."""
    root = tmp_path / 'pairs_ds'
    manifest = Manifest(root=root, rows=(ManifestRow(seed=3), ManifestRow(seed=11)))
    half = np.concatenate([solid(0, 16)[:, :8], solid(255, 16)[:, 8:]], axis=1)
    real, anime = manifest.pair_paths(3)
    write_rgb(real, half)
    write_rgb(anime, half)
    real, anime = manifest.pair_paths(11)
    write_rgb(real, half)
    write_rgb(anime, 255 - half)
    manifest.write()
    return root


@pytest.fixture
def cli_instance() -> cli.ScenePipeCLI:
    """Provides a fresh ScenePipeCLI instance for testing."""
    return cli.ScenePipeCLI()


@pytest.fixture
def sample_cfg(tmp_path: Path) -> Path:
    """Creates a temporary JSON config file for CLI testing."""
    cfg = {
        'lambda_style': 0.2,
        'epochs': 7,
        'feature_layer_ids': '[0, 4, 8]',
    }
    cfg_path = tmp_path / 'cfg.json'
    cfg_path.write_text(json.dumps(cfg))
    return cfg_path


@pytest.fixture(autouse=True)
def _no_config_env(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv('SCENEPIPE_CONFIG', raising=False)


@pytest.fixture
def gen() -> torch.Generator:
    return torch.Generator().manual_seed(0)
