"""Domain types, configuration, seeded randomness and on-disk layout shared by all stages."""

from __future__ import annotations

import json
import logging
import math
import pickle
import re

from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch

from PIL import Image
from nano_dev_utils.common import load_cfg_file, str2file

from ._constants import (
    ANIME_SFX,
    CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
    IMAGE_EXTENSIONS,
    MANIFEST_NAME,
    PAIRS_SUBDIR,
    REAL_SFX,
)
from .exceptions import (
    ChannelError,
    CheckpointError,
    ConfigError,
    DecodeError,
    NumericError,
    PersistenceError,
    ShapeError,
)

logger = logging.getLogger(__name__)

_NUM_SPLIT = re.compile(r'(\d+)').split

SUP_VARIANTS = ('style_nce', 'l1')
SUP_SCHEDULES = ('cosine', 'constant', 'zero')

_TUPLE_FIELDS = frozenset({'feature_layer_ids', 'finetune_betas', 'i2i_betas'})


@dataclass(frozen=True)
class TrainConfig:
    """Complete hyperparameter record for all three stages.

    Defaults follow the published setup; architecture fields default to a
    desk-scale configuration and are meant to be overridden for full-size runs.
    """

    # stage 1: semantic-constrained fine-tuning
    lambda_lpips: float = 0.01
    lambda_global: float = 1.0
    lambda_clip: float = 1.0
    lambda_patch: float = 0.05
    finetune_iters: int = 1000
    finetune_lr: float = 2e-3
    finetune_betas: tuple[float, float] = (0.0, 0.99)
    r1_gamma: float = 10.0
    patch_count_finetune: int = 16
    patch_size_finetune: int = 32
    truncation: float = 0.7
    n_pairs: int = 30000
    gen_blocks: int = 5
    style_dim: int = 128
    mapping_depth: int = 4
    gen_channels: int = 64
    trainable_blocks: int = 3
    w_avg_samples: int = 10000

    # stage 2: selection
    bce_threshold: float = 5.0

    # stage 3: semi-supervised translation
    lambda_style: float = 0.05
    lambda_src: float = 0.05
    lambda_hdce: float = 0.1
    lambda_perceptual: float = 1.0
    epochs: int = 20
    batch_size: int = 1
    patches_per_layer: int = 256
    feature_layer_ids: tuple[int, ...] = (0, 4, 8, 12, 16)
    embed_dim: int = 256
    nce_temperature: float = 0.07
    hdce_hardness: float = 1.0
    i2i_lr: float = 2e-4
    i2i_betas: tuple[float, float] = (0.5, 0.999)
    ngf: int = 64
    n_res_blocks: int = 9
    ndf: int = 64
    resolution: int = 256
    sup_variant: str = 'style_nce'
    sup_schedule: str = 'cosine'
    sup_period: int = 20
    use_supervised: bool = True
    use_unsupervised: bool = True
    use_cond_discriminator: bool = True
    global_perceptual: bool = False

    # prior providers
    embedder: str = 'mock'
    perceptual: str = 'mock'
    segmenter: str = 'mock'
    extractor: str = 'mock'
    embedder_weights: str | None = None
    perceptual_weights: str | None = None
    segmenter_weights: str | None = None
    extractor_weights: str | None = None

    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name.startswith('lambda_') and not getattr(self, f.name) >= 0:
                raise ConfigError(f'{f.name} must be >= 0, got {getattr(self, f.name)}')
        if not 0 < self.truncation <= 1:
            raise ConfigError(f'truncation must lie in (0, 1], got {self.truncation}')
        ids = self.feature_layer_ids
        if not ids or any(i < 0 for i in ids):
            raise ConfigError(f'feature_layer_ids must be non-negative, got {ids}')
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ConfigError(f'feature_layer_ids must be strictly increasing, got {ids}')
        if self.patch_count_finetune < 2:
            raise ConfigError('patch_count_finetune must be >= 2')
        for name in (
            'patch_size_finetune',
            'patches_per_layer',
            'embed_dim',
            'batch_size',
            'epochs',
            'sup_period',
            'gen_blocks',
            'style_dim',
            'mapping_depth',
            'gen_channels',
            'ngf',
            'ndf',
            'workers',
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be >= 1, got {getattr(self, name)}')
        for name in ('finetune_iters', 'n_pairs', 'w_avg_samples', 'n_res_blocks'):
            if getattr(self, name) < 0:
                raise ConfigError(f'{name} must be >= 0, got {getattr(self, name)}')
        if not 1 <= self.trainable_blocks <= self.gen_blocks:
            raise ConfigError(
                f'trainable_blocks must lie in [1, {self.gen_blocks}], '
                f'got {self.trainable_blocks}'
            )
        if self.nce_temperature <= 0:
            raise ConfigError('nce_temperature must be > 0')
        if self.resolution % 4:
            raise ConfigError(f'resolution must be divisible by 4, got {self.resolution}')
        if self.sup_variant not in SUP_VARIANTS:
            raise ConfigError(f"sup_variant must be one of {SUP_VARIANTS}, got '{self.sup_variant}'")
        if self.sup_schedule not in SUP_SCHEDULES:
            raise ConfigError(
                f"sup_schedule must be one of {SUP_SCHEDULES}, got '{self.sup_schedule}'"
            )
        if math.isnan(self.bce_threshold):
            raise ConfigError('bce_threshold must not be NaN')

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> TrainConfig:
        """Build a config from a (partial) mapping, defaults filling the gaps."""
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f'Unknown config field(s): {unknown}')
        for key in _TUPLE_FIELDS & data.keys():
            data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def override(self, **changes: Any) -> TrainConfig:
        for key in _TUPLE_FIELDS & changes.keys():
            changes[key] = tuple(changes[key])
        return replace(self, **changes)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        str2file(self.to_json(), str(path))
        return path

    @classmethod
    def load(cls, path: str | Path) -> TrainConfig:
        return cls.from_dict(read_config_file(path))


def read_config_file(path: str | Path | None) -> dict[str, Any]:
    """Read a JSON config file into a plain dict; ``None`` yields an empty dict."""
    if not path:
        return {}
    if not Path(path).is_file():
        raise ConfigError(f"Config file '{path}' does not exist.")
    try:
        cfg = load_cfg_file(str(path))
    except (OSError, ValueError) as e:
        raise ConfigError(f"Cannot parse config file '{path}': {e}") from e
    return dict(cfg or {})


@dataclass(frozen=True)
class LatentCode:
    """A code in the generator's intermediate latent space plus its truncation."""

    w: torch.Tensor
    truncation: float = 1.0

    def __post_init__(self) -> None:
        if not 0 <= self.truncation <= 1:
            raise ConfigError(f'truncation must lie in [0, 1], got {self.truncation}')


@dataclass(frozen=True)
class PseudoPair:
    x_p: torch.Tensor
    y_p: torch.Tensor
    seed: int
    bce_score: float | None = None

    def __post_init__(self) -> None:
        if self.x_p.shape != self.y_p.shape:
            raise ShapeError(
                f'pair members differ in shape: {tuple(self.x_p.shape)} vs {tuple(self.y_p.shape)}'
            )


@dataclass(frozen=True)
class LossReport:
    """Per-term loss values of one optimisation step, plus the weighted total."""

    terms: dict[str, float]
    total: float
    weights: dict[str, float] = field(default_factory=dict)

    def weighted_sum(self) -> float:
        return sum(self.weights.get(k, 1.0) * v for k, v in self.terms.items())

    def as_record(self, **extra: Any) -> dict[str, Any]:
        return {**extra, **self.terms, 'total': self.total}


def check_finite(value: torch.Tensor, term: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NumericError('non-finite loss', term=term)
    return value


def as_batch(img: torch.Tensor) -> torch.Tensor:
    """Lift a C×H×W image to a 1×C×H×W batch; batches pass through."""
    if img.dim() == 3:
        return img.unsqueeze(0)
    if img.dim() != 4:
        raise ShapeError(f'expected a 3D image or 4D batch, got shape {tuple(img.shape)}')
    return img


# randomness


def seeded_rng(seed: int) -> torch.Generator:
    """A private random source; identical seeds give bit-identical streams."""
    rng = torch.Generator()
    rng.manual_seed(int(seed))
    return rng


def draw_seed(rng: torch.Generator) -> int:
    return int(torch.randint(0, 2**31 - 1, (1,), generator=rng).item())


@contextmanager
def seeded_init(seed: int) -> Iterator[None]:
    """Make default parameter initialisation deterministic without leaking global state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


# images


def nat_key(name: str) -> list[int | str]:
    """Natural sorting key: 'frame2' sorts before 'frame10'."""
    return [int(part) if part.isdigit() else part.lower() for part in _NUM_SPLIT(name)]


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise PersistenceError(f"The path '{directory}' is not a directory.")
    found = [
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    ]
    return sorted(found, key=lambda p: nat_key(p.name))


def load_image(path: str | Path, resolution: int | None = None) -> torch.Tensor:
    """Decode an RGB raster into a 3×H×W float tensor in [-1, 1].

    Args:
        path: Image file.
        resolution: Square output size; ``None`` keeps the native size.
            Resizing is bilinear.
    """
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != 'RGB':
                raise ChannelError(f"'{path}' has mode {im.mode}, expected RGB")
            if resolution and im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.Resampling.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except OSError as e:
        raise DecodeError(f"Cannot decode image '{path}': {e}") from e
    return torch.from_numpy(arr.copy()).permute(2, 0, 1) / 127.5 - 1.0


def save_image(img: torch.Tensor, path: str | Path) -> Path:
    """Quantise a 3×H×W tensor in [-1, 1] to 8 bits and write it."""
    if img.dim() == 4 and img.shape[0] == 1:
        img = img[0]
    if img.dim() != 3 or img.shape[0] != 3:
        raise ChannelError(f'expected a 3×H×W image, got shape {tuple(img.shape)}')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = ((img.detach().cpu().float().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    try:
        Image.fromarray(arr.permute(1, 2, 0).numpy()).save(path)
    except OSError as e:
        raise PersistenceError(f"Cannot write image '{path}': {e}") from e
    return path


def load_image_dir(directory: str | Path, resolution: int | None) -> list[torch.Tensor]:
    return [load_image(p, resolution) for p in list_images(directory)]


# pair dataset layout


@dataclass(frozen=True)
class ManifestRow:
    seed: int
    bce_score: float | None = None
    kept: bool | None = None


@dataclass(frozen=True)
class Manifest:
    """Index of a pseudo-pair dataset: ``pairs/{seed:08d}_real.png`` / ``_anime.png``
    plus one JSON line per seed recording its score and keep flag."""

    root: Path
    rows: tuple[ManifestRow, ...] = ()

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def pair_paths(self, seed: int) -> tuple[Path, Path]:
        stem = self.root / PAIRS_SUBDIR / f'{seed:08d}'
        return stem.with_name(stem.name + REAL_SFX), stem.with_name(stem.name + ANIME_SFX)

    def kept(self) -> tuple[ManifestRow, ...]:
        return tuple(r for r in self.rows if r.kept is not False)

    def seeds(self) -> list[int]:
        return [r.seed for r in self.rows]

    def load_pair(self, row: ManifestRow, resolution: int | None = None) -> PseudoPair:
        real, anime = self.pair_paths(row.seed)
        for p in (real, anime):
            if not p.is_file():
                raise PersistenceError(f"Missing pair image '{p}'")
        return PseudoPair(
            x_p=load_image(real, resolution),
            y_p=load_image(anime, resolution),
            seed=row.seed,
            bce_score=row.bce_score,
        )

    def to_jsonl(self) -> str:
        return ''.join(json.dumps(asdict(r)) + '\n' for r in self.rows)

    def write(self) -> Path:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            str2file(self.to_jsonl(), str(self.path))
        except OSError as e:
            raise PersistenceError(f"Cannot write manifest '{self.path}': {e}") from e
        return self.path

    @classmethod
    def read(cls, root: str | Path) -> Manifest:
        root = Path(root)
        path = root / MANIFEST_NAME
        try:
            lines = path.read_text(encoding='utf-8').splitlines()
        except OSError as e:
            raise PersistenceError(f"Cannot read manifest '{path}': {e}") from e
        rows = []
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rows.append(ManifestRow(**json.loads(line)))
            except (TypeError, ValueError) as e:
                raise PersistenceError(f'{path}:{n}: malformed manifest row') from e
        return cls(root=root, rows=tuple(rows))


# checkpoints


def save_container(
    path: str | Path, kind: str, arch: dict[str, Any], payload: dict[str, Any]
) -> Path:
    """Write a versioned checkpoint: a format header, the architecture needed to
    rebuild the modules, and the state payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'kind': kind,
        'arch': arch,
        'payload': payload,
    }
    torch.save(blob, path)
    logger.info('Saved %s checkpoint to %s', kind, path)
    return path


def load_container(path: str | Path, kind: str) -> tuple[dict[str, Any], dict[str, Any]]:
    try:
        blob = torch.load(Path(path), map_location='cpu', weights_only=True)
    except FileNotFoundError as e:
        raise CheckpointError(f"Checkpoint '{path}' does not exist.") from e
    except (RuntimeError, EOFError, OSError, ValueError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"Checkpoint '{path}' is unreadable: {e}") from e
    if not isinstance(blob, dict) or blob.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"'{path}' is not a {CHECKPOINT_FORMAT} file.")
    if blob.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"'{path}' has version {blob.get('version')}, expected {CHECKPOINT_VERSION}."
        )
    if blob.get('kind') != kind:
        raise CheckpointError(f"'{path}' holds a '{blob.get('kind')}' checkpoint, not '{kind}'.")
    return blob['arch'], blob['payload']


def stack_images(images: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.stack([img if img.dim() == 3 else img[0] for img in images])
