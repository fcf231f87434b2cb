"""Adapters for the frozen pretrained priors.

Three priors feed the pipeline: an image embedder (CLIP-like, used by the
fine-tuning losses), a perceptual metric (LPIPS-like) and a semantic segmenter
(used by selection and evaluation). A fourth adapter, the feature extractor,
feeds FID. Each kind ships a deterministic mock so that every stage runs end to
end without downloaded weights; the real adapters import their libraries lazily.

All adapters are ``nn.Module``s with frozen parameters. ``embed_global``,
``embed_patches`` and ``perceptual_distance`` stay differentiable with respect
to their *inputs*, since fine-tuning backpropagates through them.
"""

from __future__ import annotations

import logging

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from torch import nn

from .core import TrainConfig, as_batch, seeded_rng
from .exceptions import BoundsError, NumericError, PriorLoadError, ShapeError

logger = logging.getLogger(__name__)

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
_CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
_CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def _renormalize(img: torch.Tensor, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    """Map [-1, 1] images to a provider's mean/std normalisation."""
    m = img.new_tensor(mean).view(1, 3, 1, 1)
    s = img.new_tensor(std).view(1, 3, 1, 1)
    return ((img + 1) / 2 - m) / s


def _freeze(module: nn.Module) -> nn.Module:
    module.requires_grad_(False)
    return module.eval()


@dataclass(frozen=True)
class SegMap:
    """Per-pixel class distribution of one image.

    Attributes:
        probs: K×H×W tensor, each pixel's distribution sums to 1.
        labels: H×W argmax labels.
        category_set: distinct labels present in the image.
    """

    probs: torch.Tensor
    labels: torch.Tensor
    category_set: frozenset[int]

    @classmethod
    def from_probs(cls, probs: torch.Tensor) -> SegMap:
        if probs.dim() != 3:
            raise ShapeError(f'expected K×H×W probabilities, got {tuple(probs.shape)}')
        if not torch.allclose(
            probs.sum(0), torch.ones_like(probs[0]), atol=1e-5
        ):
            raise NumericError('segmentation probabilities do not sum to 1', term='segment')
        labels = probs.argmax(0)
        return cls(
            probs=probs,
            labels=labels,
            category_set=frozenset(int(c) for c in labels.unique()),
        )

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> SegMap:
        return cls.from_probs(logits.softmax(0))

    @property
    def n_classes(self) -> int:
        return self.probs.shape[0]


class ImageEmbedder(nn.Module):
    """Joint image-text embedder interface: unit-norm image embeddings."""

    dim: int

    def embed_global(self, img: torch.Tensor) -> torch.Tensor:
        """Embed images; a 3D image yields a ``dim`` vector, a batch yields B×dim."""
        single = img.dim() == 3
        out = self._embed(as_batch(img))
        return out[0] if single else out

    def embed_patches(
        self, img: torch.Tensor, locations: Sequence[tuple[int, int]], patch_size: int
    ) -> torch.Tensor:
        """Embed square crops whose top-left corners are ``locations``.

        Returns a k×dim tensor, one row per location in order.
        """
        batch = as_batch(img)
        if batch.shape[0] != 1:
            raise ShapeError('embed_patches takes a single image')
        _, _, h, w = batch.shape
        if not locations:
            return batch.new_zeros(0, self.dim)
        crops = []
        for row, col in locations:
            if row < 0 or col < 0 or row + patch_size > h or col + patch_size > w:
                raise BoundsError(
                    f'patch {patch_size}×{patch_size} at ({row}, {col}) exceeds {h}×{w} image'
                )
            crops.append(batch[0, :, row : row + patch_size, col : col + patch_size])
        return self._embed(torch.stack(crops))

    def _embed(self, batch: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class PerceptualMetric(nn.Module):
    def perceptual_distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ShapeError(f'shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}')
        return self._distance(as_batch(a), as_batch(b))

    def _distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class Segmenter(nn.Module):
    n_classes: int

    @torch.no_grad()
    def segment(self, img: torch.Tensor) -> SegMap:
        batch = as_batch(img)
        if batch.shape[0] != 1:
            raise ShapeError('segment takes a single image')
        return SegMap.from_probs(self._probs(batch)[0].double())

    def _probs(self, batch: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class FeatureExtractor(nn.Module):
    """Image-set feature extractor for FID statistics."""

    dim: int

    @torch.no_grad()
    def extract(self, images: torch.Tensor, batch_size: int = 32) -> np.ndarray:
        images = as_batch(images)
        chunks = [
            self._features(images[i : i + batch_size]).double().cpu().numpy()
            for i in range(0, images.shape[0], batch_size)
        ]
        if not chunks:
            return np.zeros((0, self.dim))
        return np.concatenate(chunks)

    def _features(self, batch: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


# mocks


class MockEmbedder(ImageEmbedder):
    """Mean-pools RGB, appends a constant 1 and applies a fixed random projection,
    then L2-normalises."""

    def __init__(self, dim: int = 16, seed: int = 0) -> None:
        super().__init__()
        self.dim = dim
        self.register_buffer('projection', torch.randn(4, dim, generator=seeded_rng(seed)))
        _freeze(self)

    def _embed(self, batch: torch.Tensor) -> torch.Tensor:
        means = batch.mean(dim=(2, 3))
        homog = torch.cat([means, means.new_ones(means.shape[0], 1)], dim=1)
        return F.normalize(homog @ self.projection.to(batch.dtype), dim=1)


class MockPerceptual(PerceptualMetric):
    """Mean squared difference of 3×3 box-blurred images (replicate padding)."""

    def __init__(self) -> None:
        super().__init__()
        self.register_buffer('kernel', torch.full((3, 1, 3, 3), 1.0 / 9.0))
        _freeze(self)

    def blur(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(
            F.pad(x, (1, 1, 1, 1), mode='replicate'), self.kernel.to(x.dtype), groups=3
        )

    def _distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return (self.blur(a) - self.blur(b)).pow(2).mean()


class MockSegmenter(Segmenter):
    """Bins luminance into ``n_classes`` evenly spaced levels over [-1, 1].

    With two classes, dark pixels are class 0 and bright ones class 1.
    """

    def __init__(self, n_classes: int = 2, sharpness: float = 8.0) -> None:
        super().__init__()
        self.n_classes = n_classes
        self.sharpness = sharpness
        self.register_buffer('centers', torch.linspace(-1.0, 1.0, n_classes))
        _freeze(self)

    def _probs(self, batch: torch.Tensor) -> torch.Tensor:
        lum = batch.mean(dim=1, keepdim=True)
        c = self.centers.to(batch.dtype).view(1, -1, 1, 1)
        return (-self.sharpness * (lum - c).pow(2)).softmax(dim=1)


class MockExtractor(FeatureExtractor):
    """Average-pools to 8×8 and applies a fixed random linear map."""

    def __init__(self, dim: int = 64, seed: int = 0) -> None:
        super().__init__()
        self.dim = dim
        self.register_buffer('projection', torch.randn(3 * 64, dim, generator=seeded_rng(seed)))
        _freeze(self)

    def _features(self, batch: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(batch.float(), 8).flatten(1)
        return pooled @ self.projection


# real adapters, optional extras


def _require(module: str, extra: str = 'priors') -> Any:
    try:
        return __import__(module, fromlist=['_'])
    except ImportError as e:
        raise PriorLoadError(
            f"'{module}' is required for this provider; install scenepipe[{extra}]"
        ) from e


def _load_state(model: nn.Module, weights: str | None) -> None:
    if weights:
        try:
            model.load_state_dict(torch.load(weights, map_location='cpu', weights_only=True))
        except (OSError, RuntimeError) as e:
            raise PriorLoadError(f"Cannot load prior weights '{weights}': {e}") from e


class ClipEmbedder(ImageEmbedder):
    def __init__(self, weights: str | None = None, model_name: str = 'ViT-B/32') -> None:
        super().__init__()
        clip = _require('clip')
        try:
            model, _ = clip.load(weights or model_name, device='cpu', jit=False)
        except (OSError, RuntimeError) as e:
            raise PriorLoadError(f'Cannot load CLIP model: {e}') from e
        self.model = model.float()
        self.dim = self.model.visual.output_dim
        self.input_size = self.model.visual.input_resolution
        _freeze(self)

    def _embed(self, batch: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(
            batch, size=(self.input_size, self.input_size), mode='bicubic', align_corners=False
        )
        feats = self.model.encode_image(_renormalize(x, _CLIP_MEAN, _CLIP_STD))
        return F.normalize(feats.float(), dim=1)


class VggPerceptual(PerceptualMetric):
    """VGG-19 features up to relu4_4, unit-normalised per channel vector."""

    TAPS = (3, 8, 17, 26)

    def __init__(self, weights: str | None = None) -> None:
        super().__init__()
        models = _require('torchvision.models')
        vgg = models.vgg19(weights=None if weights else models.VGG19_Weights.IMAGENET1K_V1)
        _load_state(vgg, weights)
        self.features = vgg.features[: self.TAPS[-1] + 1]
        _freeze(self)

    def _distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        xa = _renormalize(a, _IMAGENET_MEAN, _IMAGENET_STD)
        xb = _renormalize(b, _IMAGENET_MEAN, _IMAGENET_STD)
        total = a.new_zeros(())
        for idx, layer in enumerate(self.features):
            xa, xb = layer(xa), layer(xb)
            if idx in self.TAPS:
                total = total + (F.normalize(xa, dim=1) - F.normalize(xb, dim=1)).pow(2).mean()
        return total


class DeeplabSegmenter(Segmenter):
    def __init__(self, weights: str | None = None) -> None:
        super().__init__()
        seg = _require('torchvision.models.segmentation')
        default = None if weights else seg.DeepLabV3_ResNet50_Weights.DEFAULT
        self.model = seg.deeplabv3_resnet50(weights=default)
        _load_state(self.model, weights)
        self.n_classes = self.model.classifier[-1].out_channels
        _freeze(self)

    def _probs(self, batch: torch.Tensor) -> torch.Tensor:
        logits = self.model(_renormalize(batch.float(), _IMAGENET_MEAN, _IMAGENET_STD))['out']
        logits = F.interpolate(logits, size=batch.shape[-2:], mode='bilinear', align_corners=False)
        return logits.softmax(dim=1)


class InceptionExtractor(FeatureExtractor):
    def __init__(self, weights: str | None = None) -> None:
        super().__init__()
        models = _require('torchvision.models')
        default = None if weights else models.Inception_V3_Weights.IMAGENET1K_V1
        net = models.inception_v3(weights=default, aux_logits=True, init_weights=False)
        _load_state(net, weights)
        net.fc = nn.Identity()
        self.model = net
        self.dim = 2048
        _freeze(self)

    def _features(self, batch: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(batch.float(), size=(299, 299), mode='bilinear', align_corners=False)
        return self.model(_renormalize(x, _IMAGENET_MEAN, _IMAGENET_STD))


# registry

PROVIDERS: dict[str, dict[str, Callable[..., nn.Module]]] = {
    'embedder': {'mock': lambda weights=None: MockEmbedder(), 'clip': ClipEmbedder},
    'perceptual': {'mock': lambda weights=None: MockPerceptual(), 'vgg': VggPerceptual},
    'segmenter': {'mock': lambda weights=None: MockSegmenter(), 'deeplab': DeeplabSegmenter},
    'extractor': {'mock': lambda weights=None: MockExtractor(), 'inception': InceptionExtractor},
}


def build_prior(kind: str, name: str, weights: str | None = None) -> Any:
    registry = PROVIDERS.get(kind)
    if registry is None:
        raise PriorLoadError(f"Unknown prior kind '{kind}'; known: {sorted(PROVIDERS)}")
    factory = registry.get(name)
    if factory is None:
        raise PriorLoadError(f"Unknown {kind} provider '{name}'; known: {sorted(registry)}")
    logger.info('Loading %s provider: %s', kind, name)
    return factory(weights=weights)


@dataclass(frozen=True)
class PriorSet:
    embedder: ImageEmbedder
    perceptual: PerceptualMetric
    segmenter: Segmenter

    @classmethod
    def mock(cls) -> PriorSet:
        return cls(MockEmbedder(), MockPerceptual(), MockSegmenter())

    @classmethod
    def from_config(cls, cfg: TrainConfig, kinds: Sequence[str] | None = None) -> PriorSet:
        """Build the configured providers; kinds not listed fall back to mocks."""
        wanted = set(kinds or ('embedder', 'perceptual', 'segmenter'))

        def pick(kind: str) -> Any:
            name = getattr(cfg, kind) if kind in wanted else 'mock'
            return build_prior(kind, name, getattr(cfg, f'{kind}_weights'))

        return cls(pick('embedder'), pick('perceptual'), pick('segmenter'))


def build_extractor(cfg: TrainConfig) -> FeatureExtractor:
    return build_prior('extractor', cfg.extractor, cfg.extractor_weights)
