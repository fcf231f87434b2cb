"""Stage 2: segmentation-guided selection of pseudo pairs."""

from __future__ import annotations

import logging

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import torch

from .core import Manifest, ManifestRow, PseudoPair
from .exceptions import ShapeError
from .priors import SegMap, Segmenter

logger = logging.getLogger(__name__)

_EPS = 1e-12


def segmap_cross_entropy(target: SegMap, prediction: SegMap) -> float:
    """Mean over pixels of -log p_pred(label_target)."""
    if target.labels.shape != prediction.probs.shape[1:]:
        raise ShapeError(
            f'segmentation sizes differ: {tuple(target.labels.shape)} '
            f'vs {tuple(prediction.probs.shape[1:])}'
        )
    picked = prediction.probs.gather(0, target.labels.unsqueeze(0).long())[0]
    return float(-torch.log(picked.clamp_min(_EPS)).mean())


def consistency_score(pair: PseudoPair, seg: Segmenter) -> float:
    """L_BCE of a pair: x_p's labels are the target, y_p's distribution the prediction."""
    return segmap_cross_entropy(seg.segment(pair.x_p), seg.segment(pair.y_p))


def abundance_ok(pair: PseudoPair, seg: Segmenter) -> bool:
    """True when the anime member shows at least two categories."""
    return len(seg.segment(pair.y_p).category_set) >= 2


def score_pair(pair: PseudoPair, seg: Segmenter) -> tuple[float, bool]:
    target, prediction = seg.segment(pair.x_p), seg.segment(pair.y_p)
    return segmap_cross_entropy(target, prediction), len(prediction.category_set) >= 2


def filter_dataset(
    manifest: Manifest,
    seg: Segmenter,
    threshold: float = 5.0,
    workers: int = 1,
    resolution: int | None = None,
) -> Manifest:
    """Score every pair and flag it kept iff score ≤ threshold and y_p is abundant.

    Every row is rescored from its images, so repeated runs give the same manifest.
    The updated manifest is written back to ``manifest.root``.
    """

    def judge(row: ManifestRow) -> ManifestRow:
        score, abundant = score_pair(manifest.load_pair(row, resolution), seg)
        return replace(row, bce_score=score, kept=bool(score <= threshold and abundant))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = tuple(pool.map(judge, manifest.rows))
    else:
        rows = tuple(judge(row) for row in manifest.rows)

    filtered = replace(manifest, rows=rows)
    filtered.write()
    logger.info(
        'Kept %d of %d pairs (threshold %.3f)', len(filtered.kept()), len(rows), threshold
    )
    return filtered
