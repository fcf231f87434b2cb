"""Stage 1: semantic-constrained generator fine-tuning and pseudo-pair synthesis.

A source generator ``g_s`` (real scenes) is copied into ``g_t`` and only the
last blocks of ``g_t`` are fine-tuned on anime images. Both share the same
latent space, so one latent code yields a coarsely aligned (real, anime) pair.
"""

from __future__ import annotations

import copy
import json
import logging
import math

from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F

from nano_dev_utils.common import str2file
from torch import nn

from ._constants import SEED_SPACE
from .core import (
    LatentCode,
    LossReport,
    Manifest,
    ManifestRow,
    PseudoPair,
    TrainConfig,
    check_finite,
    load_container,
    save_container,
    save_image,
    seeded_init,
    seeded_rng,
)
from .exceptions import ArgumentError, CheckpointError, ConfigError, PersistenceError, ShapeError
from .losses import adversarial_losses, finetune_patch_loss, global_semantic_loss, r1_penalty
from .priors import PriorSet

logger = logging.getLogger(__name__)

_SQRT2 = math.sqrt(2.0)


class PixelNorm(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class ModulatedConv2d(nn.Module):
    """Convolution whose input channels are scaled per sample by a style vector."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel_size: int,
        style_dim: int,
        demodulate: bool = True,
        upsample: bool = False,
    ) -> None:
        super().__init__()
        self.in_ch, self.out_ch, self.kernel_size = in_ch, out_ch, kernel_size
        self.demodulate = demodulate
        self.upsample = upsample
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size))
        self.scale = 1 / math.sqrt(in_ch * kernel_size**2)
        self.affine = nn.Linear(style_dim, in_ch)
        nn.init.ones_(self.affine.bias)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        style = self.affine(w).view(b, 1, self.in_ch, 1, 1)
        weight = self.scale * self.weight.unsqueeze(0) * style
        if self.demodulate:
            demod = torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4)) + 1e-8)
            weight = weight * demod.view(b, self.out_ch, 1, 1, 1)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode='bilinear', align_corners=False)
        h, wd = x.shape[-2:]
        out = F.conv2d(
            x.reshape(1, b * self.in_ch, h, wd),
            weight.view(b * self.out_ch, self.in_ch, self.kernel_size, self.kernel_size),
            padding=self.kernel_size // 2,
            groups=b,
        )
        return out.view(b, self.out_ch, h, wd)


class StyledConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, style_dim: int, upsample: bool = False) -> None:
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, 3, style_dim, upsample=upsample)
        self.bias = nn.Parameter(torch.zeros(1, out_ch, 1, 1))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(self.conv(x, w) + self.bias, 0.2) * _SQRT2


class ToRGB(nn.Module):
    def __init__(self, in_ch: int, style_dim: int) -> None:
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, 3, 1, style_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(1, 3, 1, 1))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        return self.conv(x, w) + self.bias


class SynthesisBlock(nn.Module):
    """Two style-modulated convolutions and a toRGB skip output."""

    def __init__(self, in_ch: int, out_ch: int, style_dim: int, upsample: bool) -> None:
        super().__init__()
        self.conv0 = StyledConv(in_ch, out_ch, style_dim, upsample=upsample)
        self.conv1 = StyledConv(out_ch, out_ch, style_dim)
        self.to_rgb = ToRGB(out_ch, style_dim)

    def forward(
        self, x: torch.Tensor, w: torch.Tensor, rgb: torch.Tensor | None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.conv1(self.conv0(x, w), w)
        skip = self.to_rgb(x, w)
        if rgb is not None:
            skip = skip + F.interpolate(rgb, scale_factor=2, mode='bilinear', align_corners=False)
        return x, skip

    def style_parameters(self) -> Iterator[nn.Parameter]:
        for conv in (self.conv0.conv, self.conv1.conv, self.to_rgb.conv):
            yield from conv.affine.parameters()


class StyleGenerator(nn.Module):
    """Small style-based generator.

    Output resolution is 4·2^(n_blocks-1); block 0 works on a learned 4×4
    constant and every later block doubles the resolution.
    """

    def __init__(
        self,
        style_dim: int = 128,
        n_blocks: int = 5,
        channels: int = 64,
        mapping_depth: int = 4,
    ) -> None:
        super().__init__()
        self.style_dim = style_dim
        self.n_blocks = n_blocks
        self.channels = channels
        self.mapping_depth = mapping_depth
        layers: list[nn.Module] = [PixelNorm()]
        for _ in range(mapping_depth):
            layers += [nn.Linear(style_dim, style_dim), nn.LeakyReLU(0.2)]
        self.mapping_net = nn.Sequential(*layers)
        self.const = nn.Parameter(torch.randn(1, channels, 4, 4))
        self.synthesis_blocks = nn.ModuleList(
            SynthesisBlock(channels, channels, style_dim, upsample=i > 0) for i in range(n_blocks)
        )
        self.register_buffer('w_avg', torch.zeros(style_dim))

    @property
    def resolution(self) -> int:
        return 4 * 2 ** (self.n_blocks - 1)

    def arch(self) -> dict[str, int]:
        return {
            'style_dim': self.style_dim,
            'n_blocks': self.n_blocks,
            'channels': self.channels,
            'mapping_depth': self.mapping_depth,
        }

    def map(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping_net(z)

    def truncate(self, w: torch.Tensor, psi: float) -> torch.Tensor:
        return self.w_avg + psi * (w - self.w_avg)

    def synthesize_w(self, w: torch.Tensor) -> torch.Tensor:
        x = self.const.expand(w.shape[0], -1, -1, -1)
        rgb = None
        for block in self.synthesis_blocks:
            x, rgb = block(x, w, rgb)
        return torch.tanh(rgb)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.synthesize_w(self.map(z))


class StyleDiscriminator(nn.Module):
    """Convolutional discriminator scoring whole images, downsampling to 4×4."""

    def __init__(self, resolution: int = 64, channels: int = 64) -> None:
        super().__init__()
        self.resolution = resolution
        self.channels = channels
        layers: list[nn.Module] = [nn.Conv2d(3, channels, 1), nn.LeakyReLU(0.2)]
        for _ in range(int(math.log2(resolution // 4))):
            layers += [
                nn.Conv2d(channels, channels, 3, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(channels, channels, 3, padding=1),
                nn.LeakyReLU(0.2),
                nn.AvgPool2d(2),
            ]
        layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.LeakyReLU(0.2), nn.Flatten()]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(channels * 16, 1)

    def arch(self) -> dict[str, int]:
        return {'resolution': self.resolution, 'channels': self.channels}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass(frozen=True)
class FreezePlan:
    """Which generator parameters fine-tuning may update.

    Attributes:
        trainable_block_count: Blocks counted from the output end that train.
        freeze_injected_styles_upto: Style affines of blocks with a lower index stay
            frozen; ``None`` means "the frozen blocks only". The mapping network and
            the input constant are always frozen.
    """

    trainable_block_count: int = 3
    freeze_injected_styles_upto: int | None = None

    def validate(self, n_blocks: int) -> None:
        if not 1 <= self.trainable_block_count <= n_blocks:
            raise ConfigError(
                f'trainable_block_count must lie in [1, {n_blocks}], '
                f'got {self.trainable_block_count}'
            )
        upto = self.freeze_injected_styles_upto
        if upto is not None and not 0 <= upto <= n_blocks:
            raise ConfigError(f'freeze_injected_styles_upto must lie in [0, {n_blocks}]')

    def trainable_parameters(self, g: StyleGenerator) -> list[nn.Parameter]:
        self.validate(g.n_blocks)
        first = g.n_blocks - self.trainable_block_count
        upto = first if self.freeze_injected_styles_upto is None else self.freeze_injected_styles_upto
        params: list[nn.Parameter] = []
        for idx in range(first, g.n_blocks):
            block = g.synthesis_blocks[idx]
            frozen_styles = {id(p) for p in block.style_parameters()} if idx < upto else set()
            params += [p for p in block.parameters() if id(p) not in frozen_styles]
        return params

    def apply(self, g: StyleGenerator) -> list[nn.Parameter]:
        """Set ``requires_grad`` according to the plan; return the trainable parameters."""
        trainable = self.trainable_parameters(g)
        g.requires_grad_(False)
        for p in trainable:
            p.requires_grad_(True)
        return trainable


def synthesize(g: StyleGenerator, latent: LatentCode) -> torch.Tensor:
    """Render a latent code, truncating toward ``g.w_avg`` when ψ < 1.

    A single code (``style_dim`` vector) gives a 3×R×R image; a batch gives B×3×R×R.
    """
    w = latent.w
    if w.shape[-1] != g.style_dim:
        raise ShapeError(f'latent dim {w.shape[-1]} != generator style dim {g.style_dim}')
    single = w.dim() == 1
    w = w.unsqueeze(0) if single else w
    if latent.truncation < 1:
        w = g.truncate(w, latent.truncation)
    img = g.synthesize_w(w)
    return img[0] if single else img


def _check_compatible(g_s: StyleGenerator, g_t: StyleGenerator) -> None:
    if g_s.arch() != g_t.arch():
        raise ConfigError(f'generator architectures differ: {g_s.arch()} vs {g_t.arch()}')


@torch.no_grad()
def sample_pair(g_s: StyleGenerator, g_t: StyleGenerator, seed: int, psi: float = 0.7) -> PseudoPair:
    """Render one pseudo pair: the same truncated latent through both generators."""
    _check_compatible(g_s, g_t)
    if not 0 < psi <= 1:
        raise ConfigError(f'truncation must lie in (0, 1], got {psi}')
    z = torch.randn(1, g_s.style_dim, generator=seeded_rng(seed))
    w = g_s.map(z)[0]
    latent = LatentCode(g_s.truncate(w, psi) if psi < 1 else w, truncation=1.0)
    return PseudoPair(x_p=synthesize(g_s, latent), y_p=synthesize(g_t, latent), seed=seed)


@torch.no_grad()
def compute_w_avg(
    g: StyleGenerator, n: int, rng: torch.Generator, batch_size: int = 1000
) -> torch.Tensor:
    """Average of ``n`` mapped latents, stored as the truncation centre."""
    if n <= 0:
        return g.w_avg
    total = torch.zeros(g.style_dim)
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        total += g.map(torch.randn(m, g.style_dim, generator=rng)).sum(0)
    g.w_avg.copy_(total / n)
    return g.w_avg


def finetune_step(
    g_t: StyleGenerator,
    g_s: StyleGenerator,
    d: StyleDiscriminator,
    anime_batch: torch.Tensor,
    plan: FreezePlan,
    cfg: TrainConfig,
    rng: torch.Generator,
    *,
    priors: PriorSet,
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer,
) -> LossReport:
    """One alternating D step and G step of semantic-constrained fine-tuning.

    The G step minimises L_GAN + λ_global·L_global + λ_patch·L_patch between
    x_p = g_s(w) and y_p = g_t(w) for freshly drawn latents. Terms whose weight
    is zero are skipped and reported as 0.
    """
    if any(p.requires_grad for p in g_s.parameters()):
        raise ConfigError('source generator must be frozen')
    plan.apply(g_t)
    batch = anime_batch.shape[0]
    with torch.no_grad():
        w = g_s.map(torch.randn(batch, g_s.style_dim, generator=rng))

    d.requires_grad_(True)
    fake = g_t.synthesize_w(w).detach()
    d_adv = check_finite(
        adversarial_losses(d(anime_batch), d(fake), 'discriminator', 'nonsaturating'), 'd_adv'
    )
    d_r1 = (
        check_finite(r1_penalty(d, anime_batch, cfg.r1_gamma), 'd_r1')
        if cfg.r1_gamma
        else d_adv.new_zeros(())
    )
    opt_d.zero_grad(set_to_none=True)
    (d_adv + d_r1).backward()
    opt_d.step()

    d.requires_grad_(False)
    with torch.no_grad():
        x_p = g_s.synthesize_w(w)
    y_p = g_t.synthesize_w(w)
    zero = y_p.new_zeros(())
    g_adv = check_finite(adversarial_losses(None, d(y_p), 'generator', 'nonsaturating'), 'g_adv')
    l_global = (
        check_finite(
            global_semantic_loss(
                x_p, y_p, cfg.lambda_lpips, priors.embedder, priors.perceptual, cfg.lambda_clip
            ),
            'global',
        )
        if cfg.lambda_global
        else zero
    )
    l_patch = (
        check_finite(
            finetune_patch_loss(
                x_p, y_p, cfg.patch_count_finetune, cfg.patch_size_finetune, rng, priors.embedder
            ),
            'patch',
        )
        if cfg.lambda_patch
        else zero
    )
    total = check_finite(
        g_adv + cfg.lambda_global * l_global + cfg.lambda_patch * l_patch, 'total'
    )
    opt_g.zero_grad(set_to_none=True)
    total.backward()
    opt_g.step()
    d.requires_grad_(True)

    return LossReport(
        terms={
            'g_adv': g_adv.item(),
            'global': l_global.item(),
            'patch': l_patch.item(),
            'd_adv': d_adv.item(),
            'd_r1': d_r1.item(),
        },
        total=total.item(),
        weights={
            'g_adv': 1.0,
            'global': cfg.lambda_global,
            'patch': cfg.lambda_patch,
            'd_adv': 0.0,
            'd_r1': 0.0,
        },
    )


@dataclass
class AdaptState:
    g_s: StyleGenerator
    g_t: StyleGenerator
    d: StyleDiscriminator
    plan: FreezePlan
    cfg: TrainConfig


def build_adapt_state(cfg: TrainConfig, g_s: StyleGenerator | None = None) -> AdaptState:
    """Fresh fine-tuning state; ``g_t`` starts as an exact copy of ``g_s``."""
    with seeded_init(cfg.seed):
        if g_s is None:
            g_s = StyleGenerator(cfg.style_dim, cfg.gen_blocks, cfg.gen_channels, cfg.mapping_depth)
        d = StyleDiscriminator(g_s.resolution, cfg.gen_channels)
    g_s.requires_grad_(False)
    g_t = copy.deepcopy(g_s)
    plan = FreezePlan(cfg.trainable_blocks)
    plan.apply(g_t)
    return AdaptState(g_s=g_s, g_t=g_t, d=d, plan=plan, cfg=cfg)


def finetune(
    state: AdaptState,
    anime_images: torch.Tensor,
    rng: torch.Generator,
    priors: PriorSet,
    iters: int | None = None,
    metrics_path: str | Path | None = None,
    log_every: int = 50,
) -> list[LossReport]:
    """Run ``iters`` (default ``cfg.finetune_iters``) fine-tuning steps."""
    cfg = state.cfg
    if anime_images.shape[0] == 0:
        raise ConfigError('anime image set is empty')
    if anime_images.shape[-1] != state.g_t.resolution:
        raise ShapeError(
            f'anime images are {anime_images.shape[-1]}px, generator renders '
            f'{state.g_t.resolution}px'
        )
    opt_g = torch.optim.Adam(
        state.plan.apply(state.g_t), lr=cfg.finetune_lr, betas=cfg.finetune_betas
    )
    opt_d = torch.optim.Adam(state.d.parameters(), lr=cfg.finetune_lr, betas=cfg.finetune_betas)
    iters = cfg.finetune_iters if iters is None else iters
    reports = []
    for it in range(1, iters + 1):
        idx = torch.randint(anime_images.shape[0], (cfg.batch_size,), generator=rng)
        report = finetune_step(
            state.g_t,
            state.g_s,
            state.d,
            anime_images[idx],
            state.plan,
            cfg,
            rng,
            priors=priors,
            opt_g=opt_g,
            opt_d=opt_d,
        )
        reports.append(report)
        if metrics_path:
            str2file(json.dumps(report.as_record(stage='finetune', iter=it)) + '\n', str(metrics_path), 'a')
        if it % log_every == 0 or it == iters:
            logger.info(
                'finetune %d/%d: %s',
                it,
                iters,
                ', '.join(f'{k}={v:.4f}' for k, v in report.terms.items()),
            )
    return reports


def save_generators(path: str | Path, state: AdaptState, rng: torch.Generator) -> Path:
    """Refresh the truncation centre and write g_s, g_t and D to one checkpoint."""
    w_avg = compute_w_avg(state.g_s, state.cfg.w_avg_samples, rng)
    state.g_t.w_avg.copy_(w_avg)
    arch: dict[str, Any] = {'generator': state.g_s.arch(), 'discriminator': state.d.arch()}
    payload = {
        'g_s': state.g_s.state_dict(),
        'g_t': state.g_t.state_dict(),
        'd': state.d.state_dict(),
        'plan': asdict(state.plan),
        'config': state.cfg.to_dict(),
    }
    return save_container(path, 'adapt', arch, payload)


def load_generators(path: str | Path) -> AdaptState:
    arch, payload = load_container(path, 'adapt')
    try:
        cfg = TrainConfig.from_dict(payload['config'])
        g_s = StyleGenerator(**arch['generator'])
        g_t = StyleGenerator(**arch['generator'])
        d = StyleDiscriminator(**arch['discriminator'])
        g_s.load_state_dict(payload['g_s'])
        g_t.load_state_dict(payload['g_t'])
        d.load_state_dict(payload['d'])
        plan = FreezePlan(**payload['plan'])
    except (KeyError, TypeError, ValueError, RuntimeError) as e:
        raise CheckpointError(f"Checkpoint '{path}' does not match its architecture: {e}") from e
    g_s.requires_grad_(False)
    plan.apply(g_t)
    return AdaptState(g_s=g_s, g_t=g_t, d=d, plan=plan, cfg=cfg)


def generate_pseudo_dataset(
    g_s: StyleGenerator,
    g_t: StyleGenerator,
    n: int,
    psi: float,
    out_dir: str | Path,
    rng: torch.Generator,
    workers: int = 1,
) -> Manifest:
    """Render ``n`` pseudo pairs under ``out_dir`` and write their manifest.

    Seeds are drawn without replacement from the random source and stored in
    ascending order; each pair depends on its seed alone.
    """
    if not 0 <= n <= SEED_SPACE:
        raise ArgumentError(f'n must lie in [0, {SEED_SPACE}], got {n}')
    _check_compatible(g_s, g_t)
    seeds = sorted(torch.randperm(SEED_SPACE, generator=rng)[:n].tolist())
    manifest = Manifest(root=Path(out_dir), rows=tuple(ManifestRow(seed=s) for s in seeds))

    def render(seed: int) -> int:
        pair = sample_pair(g_s, g_t, seed, psi)
        real, anime = manifest.pair_paths(seed)
        save_image(pair.x_p, real)
        save_image(pair.y_p, anime)
        return seed

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(render, seeds))
        else:
            for seed in seeds:
                render(seed)
    except OSError as e:
        raise PersistenceError(f"Cannot write pairs under '{out_dir}': {e}") from e
    manifest.write()
    logger.info('Wrote %d pseudo pairs to %s', n, out_dir)
    return manifest
