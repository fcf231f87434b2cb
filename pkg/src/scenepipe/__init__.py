"""scenepipe - Real scene photos to anime scenes in three stages: pseudo-pair
generation, segmentation-guided selection and semi-supervised translation.
"""

from .__version__ import __version__
from .core import Manifest, ManifestRow, PseudoPair, TrainConfig, load_image, save_image, seeded_rng
from .exceptions import ScenePipeError

__all__ = [
    'Manifest',
    'ManifestRow',
    'PseudoPair',
    'ScenePipeError',
    'TrainConfig',
    '__version__',
    'load_image',
    'save_image',
    'seeded_rng',
]
