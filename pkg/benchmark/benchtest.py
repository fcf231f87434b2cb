import logging
import tempfile

from pathlib import Path

import numpy as np

from nano_dev_utils import timer
from PIL import Image

from scenepipe._constants import LOG_DATEFMT, LOG_FORMAT
from scenepipe.core import seeded_init
from scenepipe.evaluation import infer_batch
from scenepipe.i2i import TranslationGenerator


logging.basicConfig(
    filename='Benchmark_scenepipe.log',
    level=logging.INFO,
    format=LOG_FORMAT,
    datefmt=LOG_DATEFMT,
)

ITER = 5
TIMEOUT = 600
PER_ITER = True

FRAMES = 24
SIZE = (256, 256)  # (H, W) of each frame

timer.update({'precision': 3})

work_dir = Path(tempfile.mkdtemp(prefix='scenepipe_bench_'))
frames_dir = work_dir / 'frames'


def make_frames() -> None:
    frames_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for i in range(FRAMES):
        arr = rng.integers(0, 256, (*SIZE, 3), dtype=np.uint8)
        Image.fromarray(arr).save(frames_dir / f'frame{i}.png')


with seeded_init(0):
    generator = TranslationGenerator()  # full-size: ngf=64, 9 residual blocks


@timer.timeit(iterations=ITER, timeout=TIMEOUT, per_iteration=PER_ITER)
def infer_frames():
    return infer_batch(generator, frames_dir, work_dir / 'out')


@timer.timeit(ITER, TIMEOUT, PER_ITER)
def infer_odd_size_frames():
    # sizes not divisible by 4 take the pad-translate-crop path
    return infer_batch(generator, frames_dir, work_dir / 'out_odd', resolution=254)


def run():
    make_frames()
    infer_frames()
    infer_odd_size_frames()


if __name__ == '__main__':
    run()
