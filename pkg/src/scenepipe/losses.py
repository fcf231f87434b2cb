"""Differentiable losses for fine-tuning and translation.

Conventions:
    * the fine-tuning patch loss works on raw embedding dot products with
      temperature 1;
    * the translation patch losses L2-normalise features and use a temperature
      (0.07 by default);
    * patch losses average over patches (and images) and sum over layers, except
      ``src_loss`` which averages over layers too so it stays within [0, ln 2].
"""

from __future__ import annotations

import math

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn.functional as F

from .core import as_batch
from .exceptions import AlignmentError, ArgumentError, BoundsError, NumericError, ShapeError
from .priors import ImageEmbedder, PerceptualMetric

Mode = Literal['generator', 'discriminator']
Kind = Literal['least-squares', 'nonsaturating']
Reduction = Literal['mean', 'sum']


@dataclass(frozen=True)
class LayerPatches:
    """Embedded patches of one tapped layer.

    Attributes:
        layer_id: Generator layer the features were tapped from.
        features: B×n×d tensor (an n×d tensor is read as a single image).
        locations: n flat spatial indices, shared by every image of the batch.
    """

    layer_id: int
    features: torch.Tensor
    locations: torch.Tensor

    def __post_init__(self) -> None:
        if self.features.dim() == 2:
            object.__setattr__(self, 'features', self.features.unsqueeze(0))
        if self.features.dim() != 3:
            raise ShapeError(f'layer {self.layer_id}: features must be B×n×d')
        n = self.features.shape[1]
        if self.locations.numel() != n:
            raise ShapeError(
                f'layer {self.layer_id}: {n} features but {self.locations.numel()} locations'
            )
        if self.locations.unique().numel() != n:
            raise AlignmentError(f'layer {self.layer_id}: locations are not distinct')

    @property
    def n_patches(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PatchFeatureSet:
    layers: tuple[LayerPatches, ...]

    @classmethod
    def from_tensors(
        cls,
        features: Sequence[torch.Tensor],
        layer_ids: Sequence[int] | None = None,
        locations: Sequence[torch.Tensor] | None = None,
    ) -> PatchFeatureSet:
        """Convenience constructor; missing ids/locations default to ranges."""
        ids = list(layer_ids) if layer_ids is not None else list(range(len(features)))
        layers = []
        for k, feats in enumerate(features):
            n = feats.shape[-2]
            loc = locations[k] if locations is not None else torch.arange(n)
            layers.append(LayerPatches(ids[k], feats, loc))
        return cls(tuple(layers))

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return tuple(lp.layer_id for lp in self.layers)

    def aligned_with(self, other: PatchFeatureSet) -> bool:
        if self.layer_ids != other.layer_ids:
            return False
        return all(
            torch.equal(a.locations.cpu(), b.locations.cpu())
            and a.features.shape[:2] == b.features.shape[:2]
            for a, b in zip(self.layers, other.layers)
        )


def _check_aligned(a: PatchFeatureSet, b: PatchFeatureSet, min_patches: int = 1) -> None:
    if not a.aligned_with(b):
        raise AlignmentError(
            f'feature sets are not aligned: layers {a.layer_ids} vs {b.layer_ids}'
        )
    for lp in a.layers:
        if lp.n_patches < min_patches:
            raise ArgumentError(
                f'layer {lp.layer_id}: need >= {min_patches} patches, got {lp.n_patches}'
            )


def info_nce(
    query: torch.Tensor,
    positive: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Contrastive loss -log(e^{q·p/τ} / (e^{q·p/τ} + Σ_i e^{q·n_i/τ})).

    Args:
        query: (..., d) query vectors.
        positive: (..., d) positives, one per query.
        negatives: (..., N, d) negatives per query.
        temperature: τ > 0.

    Returns:
        The loss averaged over all leading dimensions.
    """
    if temperature <= 0:
        raise ArgumentError(f'temperature must be > 0, got {temperature}')
    if negatives.dim() < 2 or negatives.shape[-2] == 0:
        raise ArgumentError('info_nce needs at least one negative')
    d = query.shape[-1]
    if positive.shape[-1] != d or negatives.shape[-1] != d:
        raise ShapeError(
            f'dim mismatch: query {d}, positive {positive.shape[-1]}, '
            f'negatives {negatives.shape[-1]}'
        )
    l_pos = (query * positive).sum(-1, keepdim=True)
    l_neg = (query.unsqueeze(-2) * negatives).sum(-1)
    logits = torch.cat([l_pos, l_neg], dim=-1) / temperature
    return (torch.logsumexp(logits, dim=-1) - logits[..., 0]).mean()


def global_semantic_loss(
    x_p: torch.Tensor,
    y_p: torch.Tensor,
    lambda_lpips: float,
    embedder: ImageEmbedder,
    perceptual: PerceptualMetric,
    lambda_clip: float = 1.0,
) -> torch.Tensor:
    """Embedding cosine distance plus weighted perceptual distance of a pair."""
    if x_p.shape != y_p.shape:
        raise ShapeError(f'shape mismatch: {tuple(x_p.shape)} vs {tuple(y_p.shape)}')
    x, y = as_batch(x_p), as_batch(y_p)
    total = x.new_zeros(())
    if lambda_clip:
        cos = F.cosine_similarity(embedder.embed_global(x), embedder.embed_global(y), dim=1)
        total = total + lambda_clip * (1 - cos).mean()
    if lambda_lpips:
        total = total + lambda_lpips * perceptual.perceptual_distance(x, y)
    return total


def sample_patch_locations(
    height: int, width: int, k: int, patch_size: int, rng: torch.Generator
) -> list[tuple[int, int]]:
    """Draw k distinct top-left corners of patches that fit the image."""
    rows, cols = height - patch_size + 1, width - patch_size + 1
    if rows < 1 or cols < 1:
        raise BoundsError(f'{patch_size}×{patch_size} patch does not fit {height}×{width}')
    if k > rows * cols:
        raise ArgumentError(f'cannot draw {k} distinct patches from {rows * cols} positions')
    flat = torch.randperm(rows * cols, generator=rng)[:k].tolist()
    return [divmod(i, cols) for i in flat]


def _off_diagonal(x: torch.Tensor) -> torch.Tensor:
    """(..., n, n) -> (..., n, n-1) with the diagonal removed, rows kept in order."""
    n = x.shape[-1]
    mask = ~torch.eye(n, dtype=torch.bool, device=x.device)
    return x[..., mask].view(*x.shape[:-2], n, n - 1)


def finetune_patch_loss(
    x_p: torch.Tensor,
    y_p: torch.Tensor,
    k: int,
    patch_size: int,
    rng: torch.Generator,
    embedder: ImageEmbedder,
) -> torch.Tensor:
    """Patch contrast between the anime image (queries) and the real image (keys).

    For every image of the batch, k shared locations are drawn; the query is the
    y_p patch, its positive the x_p patch at the same location, its negatives the
    x_p patches at the other k-1 locations.
    """
    if k < 2:
        raise ArgumentError(f'k must be >= 2, got {k}')
    x, y = as_batch(x_p), as_batch(y_p)
    if x.shape != y.shape:
        raise ShapeError(f'shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}')
    others = ~torch.eye(k, dtype=torch.bool)
    losses = []
    for b in range(x.shape[0]):
        locs = sample_patch_locations(x.shape[2], x.shape[3], k, patch_size, rng)
        v = embedder.embed_patches(y[b], locs, patch_size)
        keys = embedder.embed_patches(x[b], locs, patch_size)
        negatives = keys.unsqueeze(0).expand(k, k, -1)[others].view(k, k - 1, -1)
        losses.append(info_nce(v, keys, negatives, temperature=1.0))
    return torch.stack(losses).mean()


def _reduce(per_query: torch.Tensor, reduction: Reduction) -> torch.Tensor:
    if reduction == 'mean':
        return per_query.mean()
    return per_query.sum(-1).mean()


def _contrast_layer(
    queries: torch.Tensor,
    keys: torch.Tensor,
    temperature: float,
    hardness: float = 0.0,
) -> torch.Tensor:
    """Per-query loss (B×n) with the key at the same index as positive and the
    keys at all other indices as negatives, optionally hardness-reweighted."""
    q = F.normalize(queries, dim=-1)
    k = F.normalize(keys, dim=-1)
    sims = torch.bmm(q, k.transpose(1, 2))
    logits = sims / temperature
    if hardness:
        n = sims.shape[-1]
        eye = torch.eye(n, dtype=torch.bool, device=sims.device)
        scaled = (hardness * sims).masked_fill(eye, float('-inf'))
        log_w = math.log(n - 1) + scaled - torch.logsumexp(scaled, dim=-1, keepdim=True)
        logits = logits + log_w.masked_fill(eye, 0.0)
    return torch.logsumexp(logits, dim=-1) - torch.diagonal(logits, dim1=-2, dim2=-1)


def style_patch_nce(
    gen_feats: PatchFeatureSet,
    target_feats: PatchFeatureSet,
    temperature: float = 0.07,
    reduction: Reduction = 'mean',
) -> torch.Tensor:
    """Multi-layer patch contrast: translated-image queries against pseudo ground-truth keys.

    Args:
        gen_feats: Features of the translated image G(x_p).
        target_feats: Features of the pseudo ground truth y_p, aligned with ``gen_feats``.
        temperature: Softmax temperature.
        reduction: 'mean' averages over patches, 'sum' sums them; layers are always summed.
    """
    _check_aligned(gen_feats, target_feats, min_patches=2)
    total = gen_feats.layers[0].features.new_zeros(())
    for g, t in zip(gen_feats.layers, target_feats.layers):
        total = total + _reduce(_contrast_layer(g.features, t.features, temperature), reduction)
    return total


def hdce_loss(
    src_feats: PatchFeatureSet,
    gen_feats: PatchFeatureSet,
    temperature: float = 0.07,
    hardness_weight: float = 1.0,
    reduction: Reduction = 'mean',
) -> torch.Tensor:
    """Hard-negative-weighted patch contrast between G(x) (queries) and x (keys).

    Each negative j of query i is weighted by (n-1)·softmax_j(β·q_i·k_j), so the
    weights average to one and harder negatives count more. With β = 0 this is
    exactly ``style_patch_nce(gen_feats, src_feats)``.
    """
    _check_aligned(src_feats, gen_feats, min_patches=2)
    total = gen_feats.layers[0].features.new_zeros(())
    for s, g in zip(src_feats.layers, gen_feats.layers):
        per_query = _contrast_layer(g.features, s.features, temperature, hardness_weight)
        total = total + _reduce(per_query, reduction)
    return total


def js_divergence(p: torch.Tensor, q: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Jensen-Shannon divergence (natural log) between distributions along ``dim``."""
    m = (p + q) / 2
    kl_pm = (torch.xlogy(p, p) - torch.xlogy(p, m)).sum(dim)
    kl_qm = (torch.xlogy(q, q) - torch.xlogy(q, m)).sum(dim)
    return (kl_pm + kl_qm) / 2


def _relation_distribution(features: torch.Tensor, temperature: float) -> torch.Tensor:
    f = F.normalize(features, dim=-1)
    sims = torch.bmm(f, f.transpose(1, 2)) / temperature
    return _off_diagonal(sims).softmax(dim=-1)


def src_loss(
    src_feats: PatchFeatureSet,
    gen_feats: PatchFeatureSet,
    temperature: float = 0.07,
) -> torch.Tensor:
    """Semantic relation consistency.

    For each patch, the softmax over its similarities to the other patches of the
    same image is formed for x and for G(x); the loss is the mean Jensen-Shannon
    divergence between the two, over patches, images and layers.
    """
    _check_aligned(src_feats, gen_feats, min_patches=2)
    per_layer = [
        js_divergence(
            _relation_distribution(s.features, temperature),
            _relation_distribution(g.features, temperature),
        ).mean()
        for s, g in zip(src_feats.layers, gen_feats.layers)
    ]
    return torch.stack(per_layer).mean()


def _check_scores(scores: torch.Tensor | None, name: str) -> None:
    if scores is not None and torch.isnan(scores).any():
        raise NumericError(f'NaN in {name} scores', term=name)


def adversarial_losses(
    real_scores: torch.Tensor | None,
    fake_scores: torch.Tensor,
    mode: Mode,
    kind: Kind = 'least-squares',
) -> torch.Tensor:
    """Discriminator or generator adversarial objective.

    Args:
        real_scores: Discriminator outputs on real samples; unused (may be None)
            in generator mode.
        fake_scores: Discriminator outputs on generated samples.
        mode: 'discriminator' or 'generator'.
        kind: 'least-squares' or 'nonsaturating' (logistic).
    """
    _check_scores(real_scores, 'real')
    _check_scores(fake_scores, 'fake')
    if kind not in ('least-squares', 'nonsaturating'):
        raise ArgumentError(f"unknown adversarial kind '{kind}'")
    if mode == 'generator':
        if kind == 'least-squares':
            return 0.5 * (fake_scores - 1).pow(2).mean()
        return F.softplus(-fake_scores).mean()
    if mode != 'discriminator':
        raise ArgumentError(f"unknown adversarial mode '{mode}'")
    if real_scores is None:
        raise ArgumentError('discriminator mode needs real scores')
    if kind == 'least-squares':
        return 0.5 * (real_scores - 1).pow(2).mean() + 0.5 * fake_scores.pow(2).mean()
    return F.softplus(-real_scores).mean() + F.softplus(fake_scores).mean()


def conditional_adversarial_loss(
    d: Callable[[torch.Tensor], torch.Tensor],
    x_p: torch.Tensor,
    y_or_fake: torch.Tensor,
    mode: Mode,
    fake: torch.Tensor | None = None,
) -> torch.Tensor:
    """Least-squares loss of a discriminator conditioned on the source image.

    The discriminator sees the channel concatenation (image, x_p). In generator
    mode ``y_or_fake`` is the translation G(x_p). In discriminator mode it is the
    pseudo ground truth y_p and ``fake`` must hold G(x_p); fakes are detached.
    """
    x = as_batch(x_p)
    y = as_batch(y_or_fake)
    if x.shape != y.shape:
        raise ShapeError(f'shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}')
    scores = d(torch.cat([y, x], dim=1))
    if mode == 'generator':
        return adversarial_losses(None, scores, 'generator', 'least-squares')
    if fake is None:
        raise ArgumentError('discriminator mode needs the generated image')
    f = as_batch(fake).detach()
    if f.shape != x.shape:
        raise ShapeError(f'shape mismatch: {tuple(f.shape)} vs {tuple(x.shape)}')
    fake_scores = d(torch.cat([f, x], dim=1))
    return adversarial_losses(scores, fake_scores, 'discriminator', 'least-squares')


def r1_penalty(
    d: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor, gamma: float
) -> torch.Tensor:
    """γ/2 · E[‖∇_x D(x)‖²] on real samples."""
    real = real.detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(d(real).sum(), real, create_graph=True)
    return gamma / 2 * grad.pow(2).flatten(1).sum(1).mean()


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f'shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}')
    return (a - b).abs().mean()
