"""Stage 3: semi-supervised image-to-image translation.

Every iteration trains the generator on two branches at once: an unsupervised
branch on unpaired real and anime images, and a supervised branch on a selected
pseudo pair, whose weight decays over the epochs.
"""

from __future__ import annotations

import json
import logging
import math

from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F

from nano_dev_utils.common import str2file
from torch import nn

from .core import (
    LossReport,
    PseudoPair,
    TrainConfig,
    as_batch,
    check_finite,
    draw_seed,
    load_container,
    save_container,
    seeded_init,
    seeded_rng,
)
from .exceptions import AlignmentError, ArgumentError, CheckpointError, ConfigError, ShapeError
from .losses import (
    LayerPatches,
    PatchFeatureSet,
    adversarial_losses,
    conditional_adversarial_loss,
    hdce_loss,
    l1_loss,
    src_loss,
    style_patch_nce,
)
from .priors import PerceptualMetric

logger = logging.getLogger(__name__)

METRICS_NAME = 'metrics.jsonl'
LATEST_NAME = 'latest.pt'
# two stride-2 stages must leave at least 2×2 for the residual blocks
MIN_TRANSLATE_SIZE = 8


# networks


class Downsample(nn.Module):
    """Anti-aliased stride-2 downsampling: reflect pad, [1, 2, 1]² blur, subsample."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        taps = torch.tensor([1.0, 2.0, 1.0])
        kernel = taps[:, None] * taps[None, :]
        kernel = kernel / kernel.sum()
        self.register_buffer('kernel', kernel.expand(channels, 1, 3, 3).clone())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(
            F.pad(x, (1, 1, 1, 1), mode='reflect'), self.kernel, stride=2, groups=x.shape[1]
        )


class ResnetBlock(nn.Module):
    def __init__(self, dim: int) -> None:
        super().__init__()
        self.conv_block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv_block(x)


class TranslationGenerator(nn.Module):
    """Residual encoder-decoder with two anti-aliased downsampling stages.

    Layer indices of ``model`` (for ``ngf``=64, 9 residual blocks): 0 is the
    padded RGB input, 4 and 8 the two downsampling convolutions, 12 to 20 the
    residual blocks.
    """

    def __init__(
        self,
        ngf: int = 64,
        n_res_blocks: int = 9,
        layer_ids: Sequence[int] = (0, 4, 8, 12, 16),
    ) -> None:
        super().__init__()
        self.ngf = ngf
        self.n_res_blocks = n_res_blocks
        self.layer_ids = tuple(layer_ids)
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, ngf, 7),
            nn.InstanceNorm2d(ngf),
            nn.ReLU(True),
        ]
        for mult in (1, 2):
            layers += [
                nn.Conv2d(ngf * mult, ngf * mult * 2, 3, padding=1),
                nn.InstanceNorm2d(ngf * mult * 2),
                nn.ReLU(True),
                Downsample(ngf * mult * 2),
            ]
        layers += [ResnetBlock(ngf * 4) for _ in range(n_res_blocks)]
        for mult in (4, 2):
            layers += [
                nn.Upsample(scale_factor=2, mode='nearest'),
                nn.Conv2d(ngf * mult, ngf * mult // 2, 3, padding=1),
                nn.InstanceNorm2d(ngf * mult // 2),
                nn.ReLU(True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ngf, 3, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)
        if self.layer_ids and max(self.layer_ids) >= len(self.model):
            raise ConfigError(
                f'feature layer {max(self.layer_ids)} exceeds the {len(self.model)}-layer generator'
            )

    def arch(self) -> dict[str, Any]:
        return {
            'ngf': self.ngf,
            'n_res_blocks': self.n_res_blocks,
            'layer_ids': list(self.layer_ids),
        }

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)

    def encode(self, x: torch.Tensor, layer_ids: Sequence[int] | None = None) -> list[torch.Tensor]:
        """Feature maps at ``layer_ids`` (default: the configured taps), in order."""
        wanted = tuple(self.layer_ids if layer_ids is None else layer_ids)
        feats = []
        feat = x
        for idx, layer in enumerate(self.model):
            if not wanted or idx > wanted[-1]:
                break
            feat = layer(feat)
            if idx in wanted:
                feats.append(feat)
        return feats

    @torch.no_grad()
    def feature_channels(self) -> list[int]:
        return [f.shape[1] for f in self.encode(torch.zeros(1, 3, 16, 16))]


class ProjectionHeads(nn.Module):
    """One two-layer MLP per tapped layer, shared by both branches."""

    def __init__(self, in_channels: Sequence[int], embed_dim: int = 256) -> None:
        super().__init__()
        self.in_channels = list(in_channels)
        self.embed_dim = embed_dim
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(c, embed_dim), nn.ReLU(), nn.Linear(embed_dim, embed_dim))
            for c in self.in_channels
        )

    def arch(self) -> dict[str, Any]:
        return {'in_channels': self.in_channels, 'embed_dim': self.embed_dim}

    def forward(self, index: int, x: torch.Tensor) -> torch.Tensor:
        return self.mlps[index](x)


class PatchDiscriminator(nn.Module):
    """70×70 PatchGAN: three stride-2 convolutions, one stride-1, then a 1-channel map."""

    def __init__(self, in_channels: int = 3, ndf: int = 64) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.ndf = ndf
        layers: list[nn.Module] = [
            nn.Conv2d(in_channels, ndf, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, True),
        ]
        nf = ndf
        for stride in (2, 2, 1):
            layers += [
                nn.Conv2d(nf, min(nf * 2, 512), 4, stride=stride, padding=1),
                nn.InstanceNorm2d(min(nf * 2, 512)),
                nn.LeakyReLU(0.2, True),
            ]
            nf = min(nf * 2, 512)
        layers += [nn.Conv2d(nf, 1, 4, padding=1)]
        self.model = nn.Sequential(*layers)

    def arch(self) -> dict[str, int]:
        return {'in_channels': self.in_channels, 'ndf': self.ndf}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


def translate(g: TranslationGenerator, x: torch.Tensor) -> torch.Tensor:
    """Translate an image or batch; height and width must be divisible by 4 and at least 8."""
    h, w = x.shape[-2:]
    if h % 4 or w % 4:
        raise ShapeError(f'image size {h}×{w} is not divisible by 4')
    if min(h, w) < MIN_TRANSLATE_SIZE:
        raise ShapeError(f'image size {h}×{w} is below {MIN_TRANSLATE_SIZE}×{MIN_TRANSLATE_SIZE}')
    with torch.no_grad():
        out = g(as_batch(x))
    return out[0] if x.dim() == 3 else out


def lambda_sup(t: int, period: int = 20, schedule: str = 'cosine') -> float:
    """Weight of the supervised branch at epoch ``t`` (1-based).

    The cosine schedule is cos(π/(2·period)·(t-1)), independent of the run
    length: 1 at the first epoch, cos(19π/40) at epoch 20 for the default
    period, and clamped at 0 once t passes period + 1.
    """
    if t < 1:
        raise ArgumentError(f'epoch index starts at 1, got {t}')
    if period < 1:
        raise ArgumentError(f'period must be >= 1, got {period}')
    if schedule == 'cosine':
        return max(0.0, math.cos(math.pi / (2 * period) * (t - 1)))
    if schedule == 'constant':
        return 1.0
    if schedule == 'zero':
        return 0.0
    raise ArgumentError(f"unknown schedule '{schedule}'")


def extract_patch_features(
    g: TranslationGenerator,
    heads: ProjectionHeads,
    img: torch.Tensor,
    n_per_layer: int,
    rng: torch.Generator,
    reuse_locations: PatchFeatureSet | None = None,
    strict: bool = True,
) -> PatchFeatureSet:
    """Sample spatial positions at every tapped layer and project them through the heads.

    With ``reuse_locations`` the positions of an earlier call are reused, so the
    two sets line up patch for patch. With ``strict=False`` a layer with fewer
    positions than ``n_per_layer`` contributes all of them instead of failing.
    """
    feats = g.encode(as_batch(img))
    if reuse_locations is not None and reuse_locations.layer_ids != g.layer_ids:
        raise AlignmentError(
            f'reused layers {reuse_locations.layer_ids} differ from taps {g.layer_ids}'
        )
    layers = []
    for k, (layer_id, feat) in enumerate(zip(g.layer_ids, feats)):
        flat = feat.permute(0, 2, 3, 1).flatten(1, 2)
        positions = flat.shape[1]
        if reuse_locations is not None:
            loc = reuse_locations.layers[k].locations
            if loc.numel() and int(loc.max()) >= positions:
                raise AlignmentError(f'layer {layer_id}: reused location outside {positions} positions')
        else:
            n = n_per_layer if strict else min(n_per_layer, positions)
            if n > positions:
                raise ShapeError(f'layer {layer_id}: {n} patches requested, {positions} positions')
            loc = torch.randperm(positions, generator=rng)[:n]
        layers.append(LayerPatches(layer_id, heads(k, flat[:, loc.to(flat.device)]), loc))
    return PatchFeatureSet(tuple(layers))


@dataclass
class BranchLoss:
    """Per-term losses of one branch with the weighted total, still on the graph."""

    total: torch.Tensor
    terms: dict[str, torch.Tensor]
    weights: dict[str, float]
    fake: torch.Tensor
    features: tuple[PatchFeatureSet, ...] = ()

    def report(self) -> LossReport:
        return LossReport(
            terms={k: float(v.detach()) for k, v in self.terms.items()},
            total=float(self.total.detach()),
            weights=dict(self.weights),
        )


def _weighted(terms: dict[str, torch.Tensor], weights: dict[str, float], ref: torch.Tensor) -> torch.Tensor:
    total = ref.new_zeros(())
    for name, value in terms.items():
        check_finite(value, name)
        total = total + weights[name] * value
    return check_finite(total, 'total')


def supervised_branch_loss(
    g: TranslationGenerator,
    heads: ProjectionHeads,
    d_p: PatchDiscriminator,
    pair: PseudoPair,
    cfg: TrainConfig,
    rng: torch.Generator,
    fake: torch.Tensor | None = None,
) -> BranchLoss:
    """L_sup = L_cGAN(D_p) + λ_style · style term on a pseudo pair.

    The style term is StylePatchNCE between G(x_p) and y_p at shared locations,
    or mean absolute pixel difference when ``cfg.sup_variant == 'l1'``.
    """
    x, y = as_batch(pair.x_p), as_batch(pair.y_p)
    fake = g(x) if fake is None else fake
    zero = fake.new_zeros(())
    terms = {'cgan': zero, 'style': zero}
    feats: tuple[PatchFeatureSet, ...] = ()
    if cfg.use_cond_discriminator:
        terms['cgan'] = conditional_adversarial_loss(d_p, x, fake, 'generator')
    if cfg.lambda_style:
        if cfg.sup_variant == 'l1':
            terms['style'] = l1_loss(fake, y)
        else:
            gen_f = extract_patch_features(g, heads, fake, cfg.patches_per_layer, rng, strict=False)
            tgt_f = extract_patch_features(
                g, heads, y, cfg.patches_per_layer, rng, reuse_locations=gen_f
            )
            terms['style'] = style_patch_nce(gen_f, tgt_f, cfg.nce_temperature)
            feats = (gen_f, tgt_f)
    weights = {'cgan': 1.0, 'style': cfg.lambda_style}
    return BranchLoss(_weighted(terms, weights, fake), terms, weights, fake, feats)


def unsupervised_branch_loss(
    g: TranslationGenerator,
    heads: ProjectionHeads,
    d_u: PatchDiscriminator,
    x: torch.Tensor,
    y: torch.Tensor,
    cfg: TrainConfig,
    rng: torch.Generator,
    fake: torch.Tensor | None = None,
    perceptual: PerceptualMetric | None = None,
) -> BranchLoss:
    """L_unsup = L_GAN(D_u) + λ_SRC·L_SRC + λ_hDCE·L_hDCE (+ λ_perceptual·content).

    ``y`` is the unpaired anime sample; the generator term only scores G(x), the
    discriminator sees ``y`` in its own step.
    """
    x = as_batch(x)
    fake = g(x) if fake is None else fake
    zero = fake.new_zeros(())
    terms = {
        'gan': adversarial_losses(None, d_u(fake), 'generator', 'least-squares'),
        'src': zero,
        'hdce': zero,
    }
    weights = {'gan': 1.0, 'src': cfg.lambda_src, 'hdce': cfg.lambda_hdce}
    feats: tuple[PatchFeatureSet, ...] = ()
    if cfg.lambda_src or cfg.lambda_hdce:
        src_f = extract_patch_features(g, heads, x, cfg.patches_per_layer, rng, strict=False)
        gen_f = extract_patch_features(
            g, heads, fake, cfg.patches_per_layer, rng, reuse_locations=src_f
        )
        if cfg.lambda_src:
            terms['src'] = src_loss(src_f, gen_f, cfg.nce_temperature)
        if cfg.lambda_hdce:
            terms['hdce'] = hdce_loss(src_f, gen_f, cfg.nce_temperature, cfg.hdce_hardness)
        feats = (src_f, gen_f)
    if cfg.global_perceptual:
        if perceptual is None:
            raise ConfigError('global_perceptual needs a perceptual metric')
        terms['perceptual'] = perceptual.perceptual_distance(x, fake)
        weights['perceptual'] = cfg.lambda_perceptual
    return BranchLoss(_weighted(terms, weights, fake), terms, weights, fake, feats)


# training


@dataclass
class TrainState:
    g: TranslationGenerator
    heads: ProjectionHeads
    d_u: PatchDiscriminator
    d_p: PatchDiscriminator
    optimizers: dict[str, torch.optim.Optimizer]
    cfg: TrainConfig
    epoch: int = 0


def _optimizers(
    g: TranslationGenerator,
    heads: ProjectionHeads,
    d_u: PatchDiscriminator,
    d_p: PatchDiscriminator,
    cfg: TrainConfig,
) -> dict[str, torch.optim.Optimizer]:
    def adam(params: Any) -> torch.optim.Optimizer:
        return torch.optim.Adam(params, lr=cfg.i2i_lr, betas=cfg.i2i_betas)

    return {
        'g': adam([*g.parameters(), *heads.parameters()]),
        'd_u': adam(d_u.parameters()),
        'd_p': adam(d_p.parameters()),
    }


def build_train_state(cfg: TrainConfig) -> TrainState:
    with seeded_init(cfg.seed):
        g = TranslationGenerator(cfg.ngf, cfg.n_res_blocks, cfg.feature_layer_ids)
        heads = ProjectionHeads(g.feature_channels(), cfg.embed_dim)
        d_u = PatchDiscriminator(3, cfg.ndf)
        d_p = PatchDiscriminator(6, cfg.ndf)
    return TrainState(g, heads, d_u, d_p, _optimizers(g, heads, d_u, d_p, cfg), cfg)


def _step(opt: torch.optim.Optimizer, loss: torch.Tensor) -> None:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()


def train_epoch(
    state: TrainState,
    real_set: Sequence[torch.Tensor],
    anime_set: Sequence[torch.Tensor],
    pair_set: Sequence[PseudoPair],
    t: int,
    cfg: TrainConfig,
    rng: torch.Generator,
    perceptual: PerceptualMetric | None = None,
    metrics_path: str | Path | None = None,
) -> tuple[TrainState, dict[str, Any]]:
    """One epoch of L_unsup + λ_sup(t)·L_sup, one iteration per real image.

    Each iteration renders G(x) and G(x_p), updates D_u, then D_p, then the
    generator and heads jointly. With λ_sup(t) = 0 the supervised branch and
    D_p are skipped entirely; with ``use_unsupervised`` off, so are the
    unsupervised branch and D_u.
    """
    if not 1 <= t <= cfg.epochs:
        raise ArgumentError(f'epoch {t} outside 1..{cfg.epochs}')
    if not len(real_set) or not len(anime_set):
        raise ConfigError('real and anime sets must not be empty')
    lam = lambda_sup(t, cfg.sup_period, cfg.sup_schedule) if cfg.use_supervised else 0.0
    supervised = lam > 0
    if supervised and not len(pair_set):
        raise ConfigError('pair set is empty')
    if not cfg.use_unsupervised and not supervised:
        raise ConfigError(f'epoch {t}: both branches are disabled')

    shuffle_rng, unsup_rng, sup_rng = (seeded_rng(draw_seed(rng)) for _ in range(3))
    order_real = torch.randperm(len(real_set), generator=shuffle_rng).tolist()
    order_anime = torch.randperm(len(anime_set), generator=shuffle_rng).tolist()
    order_pairs = torch.randperm(len(pair_set), generator=shuffle_rng).tolist() if pair_set else []

    g, heads, d_u, d_p, opts = state.g, state.heads, state.d_u, state.d_p, state.optimizers
    records = []
    for i, ridx in enumerate(order_real):
        x = as_batch(real_set[ridx])
        y = as_batch(anime_set[order_anime[i % len(order_anime)]])
        pair = pair_set[order_pairs[i % len(order_pairs)]] if supervised else None

        fake_x = g(x) if cfg.use_unsupervised else None
        fake_p = g(as_batch(pair.x_p)) if pair is not None else None

        d_u_loss = x.new_zeros(())
        if fake_x is not None:
            d_u_loss = check_finite(
                adversarial_losses(d_u(y), d_u(fake_x.detach()), 'discriminator'), 'd_u'
            )
            _step(opts['d_u'], d_u_loss)
        d_p_loss = x.new_zeros(())
        if pair is not None and cfg.use_cond_discriminator:
            d_p_loss = check_finite(
                conditional_adversarial_loss(d_p, pair.x_p, pair.y_p, 'discriminator', fake=fake_p),
                'd_p',
            )
            _step(opts['d_p'], d_p_loss)

        d_u.requires_grad_(False)
        d_p.requires_grad_(False)
        total = x.new_zeros(())
        unsup_terms: dict[str, float] = {'gan': 0.0, 'src': 0.0, 'hdce': 0.0}
        if fake_x is not None:
            unsup = unsupervised_branch_loss(
                g, heads, d_u, x, y, cfg, unsup_rng, fake=fake_x, perceptual=perceptual
            )
            total = total + unsup.total
            unsup_terms = unsup.report().terms
        sup_terms: dict[str, float] = {'cgan': 0.0, 'style': 0.0}
        if pair is not None:
            sup = supervised_branch_loss(g, heads, d_p, pair, cfg, sup_rng, fake=fake_p)
            total = total + lam * sup.total
            sup_terms = sup.report().terms
        _step(opts['g'], check_finite(total, 'total'))
        d_u.requires_grad_(True)
        d_p.requires_grad_(True)

        record = {
            'epoch': t,
            'iter': i + 1,
            'lambda_sup': lam,
            'd_u': d_u_loss.item(),
            'd_p': d_p_loss.item(),
            **{f'unsup_{k}': v for k, v in unsup_terms.items()},
            **{f'sup_{k}': v for k, v in sup_terms.items()},
            'total': total.item(),
        }
        records.append(record)
        if metrics_path:
            str2file(json.dumps(record) + '\n', str(metrics_path), 'a')

    state.epoch = t
    summary = {
        k: sum(r[k] for r in records) / len(records)
        for k in records[0]
        if k not in ('epoch', 'iter')
    }
    logger.info(
        'epoch %d/%d: %s', t, cfg.epochs, ', '.join(f'{k}={v:.4f}' for k, v in summary.items())
    )
    return state, {'epoch': t, 'lambda_sup': lam, 'means': summary, 'records': records}


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    arch = {
        'generator': state.g.arch(),
        'heads': state.heads.arch(),
        'd_u': state.d_u.arch(),
        'd_p': state.d_p.arch(),
    }
    payload = {
        'g': state.g.state_dict(),
        'heads': state.heads.state_dict(),
        'd_u': state.d_u.state_dict(),
        'd_p': state.d_p.state_dict(),
        'optimizers': {k: opt.state_dict() for k, opt in state.optimizers.items()},
        'epoch': state.epoch,
        'config': state.cfg.to_dict(),
    }
    return save_container(path, 'i2i', arch, payload)


def load_checkpoint(path: str | Path) -> TrainState:
    arch, payload = load_container(path, 'i2i')
    try:
        cfg = TrainConfig.from_dict(payload['config'])
        g = TranslationGenerator(**arch['generator'])
        heads = ProjectionHeads(**arch['heads'])
        d_u = PatchDiscriminator(**arch['d_u'])
        d_p = PatchDiscriminator(**arch['d_p'])
        for module, key in ((g, 'g'), (heads, 'heads'), (d_u, 'd_u'), (d_p, 'd_p')):
            module.load_state_dict(payload[key])
        optimizers = _optimizers(g, heads, d_u, d_p, cfg)
        for key, opt in optimizers.items():
            opt.load_state_dict(payload['optimizers'][key])
        epoch = int(payload['epoch'])
    except (KeyError, TypeError, ValueError, RuntimeError) as e:
        raise CheckpointError(f"Checkpoint '{path}' does not match its architecture: {e}") from e
    return TrainState(g, heads, d_u, d_p, optimizers, cfg, epoch=epoch)


@dataclass
class TrainResult:
    state: TrainState
    epochs: list[dict[str, Any]] = field(default_factory=list)


def train(
    cfg: TrainConfig,
    real_set: Sequence[torch.Tensor],
    anime_set: Sequence[torch.Tensor],
    pair_set: Sequence[PseudoPair],
    out_dir: str | Path,
    perceptual: PerceptualMetric | None = None,
    resume: str | Path | None = None,
) -> TrainResult:
    """Train epochs after the resumed one (or from 1) through ``cfg.epochs``.

    Epoch ``t`` draws from ``seeded_rng(cfg.seed + t)``, so a resumed run repeats
    the uninterrupted one. A checkpoint is written after every epoch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(resume) if resume else build_train_state(cfg)
    if resume:
        logger.info('Resuming from %s after epoch %d', resume, state.epoch)
    result = TrainResult(state)
    for t in range(state.epoch + 1, cfg.epochs + 1):
        state, metrics = train_epoch(
            state,
            real_set,
            anime_set,
            pair_set,
            t,
            cfg,
            seeded_rng(cfg.seed + t),
            perceptual=perceptual,
            metrics_path=out_dir / METRICS_NAME,
        )
        result.epochs.append(metrics)
        save_checkpoint(state, out_dir / f'epoch_{t:03d}.pt')
        save_checkpoint(state, out_dir / LATEST_NAME)
    return result
