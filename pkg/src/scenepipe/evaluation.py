"""FID, the L_BCE consistency metric and frame-wise batch inference."""

from __future__ import annotations

import logging

from collections.abc import Sequence
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from scipy import linalg

from .core import Manifest, as_batch, list_images, load_image, load_image_dir, save_image, stack_images
from .exceptions import ArgumentError, ChannelError, DecodeError, NumericError, ShapeError
from .i2i import MIN_TRANSLATE_SIZE, TranslationGenerator, load_checkpoint, translate
from .priors import FeatureExtractor, Segmenter
from .selection import consistency_score, segmap_cross_entropy

logger = logging.getLogger(__name__)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; negative eigenvalues are clipped to 0."""
    vals, vecs = linalg.eigh(mat)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def _check_features(feats: np.ndarray, name: str) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise ShapeError(f'{name}: expected an n×d matrix, got shape {feats.shape}')
    if feats.shape[0] < 2:
        raise ArgumentError(f'{name}: need at least 2 rows, got {feats.shape[0]}')
    if not np.isfinite(feats).all():
        raise NumericError(f'{name}: non-finite features', term=name)
    return feats


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    tr((Σa·Σb)^½) is taken as tr((A·Σb·A)^½) with A = Σa^½, which only needs
    square roots of symmetric matrices.
    """
    a = _check_features(features_a, 'features_a')
    b = _check_features(features_b, 'features_b')
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f'feature dims differ: {a.shape[1]} vs {b.shape[1]}')
    mu_diff = a.mean(0) - b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    sqrt_a = _psd_sqrt(cov_a)
    middle = sqrt_a @ cov_b @ sqrt_a
    tr_covmean = np.sqrt(np.clip(linalg.eigvalsh((middle + middle.T) / 2), 0, None)).sum()
    value = mu_diff @ mu_diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_covmean
    return float(max(value, 0.0))


def extract_image_set(images: Sequence[torch.Tensor], extractor: FeatureExtractor) -> np.ndarray:
    """Features of an image list; images of equal size are batched together.

    Rows come out grouped by size, which FID does not depend on.
    """
    by_size: dict[tuple[int, int], list[torch.Tensor]] = {}
    for img in images:
        by_size.setdefault(tuple(img.shape[-2:]), []).append(img)
    return np.concatenate([extractor.extract(stack_images(group)) for group in by_size.values()])


def fid_from_dirs(
    dir_a: str | Path,
    dir_b: str | Path,
    extractor: FeatureExtractor,
    resolution: int | None = None,
) -> float:
    """FID between two image directories; without ``resolution`` sizes may differ."""
    feats = []
    for directory in (dir_a, dir_b):
        images = load_image_dir(directory, resolution)
        if len(images) < 2:
            raise ArgumentError(f"'{directory}' holds {len(images)} images, need at least 2")
        feats.append(extract_image_set(images, extractor))
    return fid(*feats)


def bce_metric(
    outputs: Sequence[torch.Tensor], references: Sequence[torch.Tensor], seg: Segmenter
) -> float:
    """Mean L_BCE over aligned pairs: reference labels as target, output as prediction."""
    if len(outputs) != len(references):
        raise ArgumentError(f'{len(outputs)} outputs vs {len(references)} references')
    if not len(outputs):
        raise ArgumentError('bce_metric needs at least one pair')
    scores = [
        segmap_cross_entropy(seg.segment(ref), seg.segment(out))
        for out, ref in zip(outputs, references)
    ]
    return sum(scores) / len(scores)


def dataset_bce(manifest: Manifest, seg: Segmenter, resolution: int | None = None) -> float:
    """Mean consistency score over every pair of a dataset, kept or not."""
    if not manifest.rows:
        raise ArgumentError(f"pair dataset '{manifest.root}' is empty")
    scores = [consistency_score(manifest.load_pair(row, resolution), seg) for row in manifest.rows]
    return sum(scores) / len(scores)


def _translate_padded(g: TranslationGenerator, img: torch.Tensor) -> torch.Tensor:
    h, w = img.shape[-2:]
    pad_h = max(MIN_TRANSLATE_SIZE, h + (-h) % 4) - h
    pad_w = max(MIN_TRANSLATE_SIZE, w + (-w) % 4) - w
    # reflect padding needs the pad to be smaller than the side it mirrors
    mode = 'reflect' if pad_h < h and pad_w < w else 'replicate'
    padded = F.pad(as_batch(img), (0, pad_w, 0, pad_h), mode=mode)
    return translate(g, padded)[0, :, :h, :w]


def infer_batch(
    checkpoint: str | Path | TranslationGenerator,
    in_dir: str | Path,
    out_dir: str | Path,
    resolution: int | None = None,
) -> int:
    """Translate every image of ``in_dir`` into ``out_dir`` under the same name.

    Frames are handled one at a time in natural filename order. Sizes that are
    not multiples of 4, or below the generator's minimum, are padded (reflect,
    or replicate for tiny frames), translated and cropped back.
    Undecodable files are skipped with a warning.

    Returns:
        The number of images written.
    """
    g = checkpoint if isinstance(checkpoint, TranslationGenerator) else load_checkpoint(checkpoint).g
    g.eval()
    files = list_images(in_dir)
    out_dir = Path(out_dir)
    written = 0
    for path in files:
        try:
            img = load_image(path, resolution)
        except (DecodeError, ChannelError) as e:
            logger.warning('Skipping %s: %s', path.name, e)
            continue
        save_image(_translate_padded(g, img), out_dir / path.name)
        written += 1
    if files and not written:
        raise DecodeError(f"none of the {len(files)} images in '{in_dir}' could be decoded")
    logger.info('Translated %d of %d images into %s', written, len(files), out_dir)
    return written
