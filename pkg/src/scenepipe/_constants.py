PKG_NAME = 'scenepipe'
CONFIG_ENV_VAR = 'SCENEPIPE_CONFIG'

PAIRS_SUBDIR = 'pairs'
REAL_SFX = '_real.png'
ANIME_SFX = '_anime.png'
MANIFEST_NAME = 'manifest.jsonl'

CHECKPOINT_FORMAT = 'scenepipe-ckpt'
CHECKPOINT_VERSION = 1

IMAGE_EXTENSIONS = frozenset({'.png', '.jpg', '.jpeg', '.bmp', '.webp'})

SEED_SPACE = 2**20

LOG_FORMAT = '%(asctime)s - %(levelname)s: %(message)s'
LOG_DATEFMT = '%d-%m-%Y %H:%M:%S'
