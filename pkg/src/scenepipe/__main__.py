"""CLI interface for scenepipe."""

from __future__ import annotations

import argparse
import ast
import logging
import os
import sys

from collections.abc import Callable, Sequence
from dataclasses import fields
from typing import Any

from ._constants import CONFIG_ENV_VAR, LOG_DATEFMT, LOG_FORMAT
from .__version__ import __version__
from .adapt import (
    build_adapt_state,
    finetune,
    generate_pseudo_dataset,
    load_generators,
    save_generators,
)
from .core import (
    Manifest,
    TrainConfig,
    load_image_dir,
    read_config_file,
    seeded_rng,
    stack_images,
)
from .evaluation import bce_metric, dataset_bce, fid_from_dirs, infer_batch
from .exceptions import ConfigError
from .i2i import train
from .priors import PriorSet, build_extractor, build_prior
from .selection import filter_dataset

logger = logging.getLogger(__name__)

_DEFAULTS = TrainConfig()
CONFIG_KEYS = tuple(f.name for f in fields(TrainConfig))
LIST_KEYS = {k for k in CONFIG_KEYS if isinstance(getattr(_DEFAULTS, k), tuple)}
ALIASES = {'bce_threshold': ('--threshold',), 'segmenter': ('--seg-provider',)}


class ScenePipeCLI:
    """Command-line interface for the three pipeline stages and their evaluation."""

    def __init__(self) -> None:
        self.common = argparse.ArgumentParser(add_help=False)
        self._add_common_arguments()
        self.parser = argparse.ArgumentParser(
            prog='scenepipe',
            description=(
                'Scene stylisation pipeline: generator fine-tuning, pseudo-pair '
                'generation and filtering, semi-supervised translation training, '
                'inference and evaluation.\n'
                'Config fields come from --config (or $SCENEPIPE_CONFIG); explicit '
                'flags override them. List fields accept space-separated or '
                'Python-style list input.'
            ),
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )
        self.parser.add_argument('--version', '-v', action='version', version=__version__)
        self._add_commands()
        self.defaults: dict[str, Any] | None = None

    def _add_common_arguments(self) -> None:
        group = self.common.add_argument_group('run')
        group.add_argument('--config', type=str, help='Path to JSON config file.')
        group.add_argument('--log-level', default='INFO', help='Logging level.')
        group.add_argument('--log-file', type=str, help='Write the log to this file.')
        cfg_group = self.common.add_argument_group('config fields')
        for name in CONFIG_KEYS:
            default = getattr(_DEFAULTS, name)
            flags = (f'--{name.replace("_", "-")}', *ALIASES.get(name, ()))
            if isinstance(default, bool):
                cfg_group.add_argument(
                    *flags, dest=name, action=argparse.BooleanOptionalAction, default=default
                )
            elif isinstance(default, tuple):
                cfg_group.add_argument(
                    *flags, dest=name, nargs='+', default=list(default), metavar='V'
                )
            else:
                kind = str if default is None else type(default)
                cfg_group.add_argument(*flags, dest=name, type=kind, default=default)

    def _add_commands(self) -> None:
        sub = self.parser.add_subparsers(dest='command', required=True, metavar='COMMAND')

        def add(name: str, help_text: str) -> argparse.ArgumentParser:
            return sub.add_parser(
                name,
                parents=[self.common],
                help=help_text,
                formatter_class=argparse.ArgumentDefaultsHelpFormatter,
            )

        p = add('finetune-gen', 'Fine-tune the anime generator (stage 1).')
        p.add_argument('--anime-dir', required=True, help='Anime training images.')
        p.add_argument('--out', required=True, help='Output generator checkpoint.')
        p.add_argument('--source', help='Generator checkpoint whose source generator to start from.')
        p.add_argument('--metrics', help='Append per-iteration metric records to this file.')

        p = add('gen-pairs', 'Render pseudo pairs from fine-tuned generators.')
        p.add_argument('--ckpt', required=True, help='Generator checkpoint.')
        p.add_argument('--out', required=True, help='Pair dataset directory.')

        p = add('filter-pairs', 'Score and filter a pair dataset (stage 2).')
        p.add_argument('--pairs-dir', required=True, help='Pair dataset directory.')

        p = add('train', 'Train the translation model (stage 3).')
        p.add_argument('--real-dir', required=True, help='Unpaired real scene images.')
        p.add_argument('--anime-dir', required=True, help='Unpaired anime images.')
        p.add_argument('--pairs-dir', help='Filtered pair dataset.')
        p.add_argument('--out', required=True, help='Checkpoint and metrics directory.')
        p.add_argument('--resume', help='Checkpoint to resume from.')

        p = add('infer', 'Translate a directory of images or video frames.')
        p.add_argument('--ckpt', required=True, help='Translation checkpoint.')
        p.add_argument('--in', dest='in_dir', required=True, help='Input directory.')
        p.add_argument('--out', required=True, help='Output directory.')
        p.add_argument('--size', type=int, help='Resize inputs to this square size first.')

        p = add('eval-fid', 'FID between two image sets.')
        p.add_argument('--set-a', required=True)
        p.add_argument('--set-b', required=True)
        p.add_argument('--size', type=int, help='Resize images to this square size first.')

        p = add('eval-bce', 'Mean L_BCE semantic consistency.')
        p.add_argument('--outputs', help='Translated images.')
        p.add_argument('--references', help='Matching source images.')
        p.add_argument('--pairs-dir', help='Score every pair of a pair dataset instead.')
        p.add_argument('--size', type=int, help='Resize images to this square size first.')

        add('show-config', 'Print the resolved configuration.')

    def parse(self, argv: Sequence[str] | None = None) -> argparse.Namespace:
        """Parse CLI arguments and attach defaults for later comparison."""
        self.defaults = {k: v for k, v in vars(self.common.parse_args([])).items() if k in CONFIG_KEYS}
        args = self.parser.parse_args(argv)
        setattr(args, '_defaults', self.defaults)
        return args

    def merge_config(
        self, cli_args: argparse.Namespace, cfg_dict: dict[str, Any] | None
    ) -> dict[str, Any]:
        """
        Merge CLI arguments with an optional configuration file.

        Precedence:
          CLI explicit > Config > Defaults.
        List-type fields given on the command line replace the configured ones.
        """
        cfg_dict = cfg_dict or {}
        defaults = getattr(cli_args, '_defaults', {})
        cli_values = vars(cli_args)

        merged = {k: (self.normalize_list(v) if k in LIST_KEYS else v) for k, v in cfg_dict.items()}

        # explicit CLI args differ from the parser defaults
        for key in CONFIG_KEYS:
            value = cli_values.get(key)
            if key in LIST_KEYS:
                value = self.normalize_list(value)
            if value != defaults.get(key):
                merged[key] = value

        for key in LIST_KEYS & merged.keys():
            merged[key] = _coerce_list(key, merged[key])
        return merged

    @staticmethod
    def normalize_list(value: Any) -> list[Any] | None:
        """Normalize list-like inputs from CLI or config.

        Supports:
          - space-separated inputs: e.g. --feature-layer-ids 0 4 8
          - single Python-style list strings: e.g. "[0, 4, 8]"
          - JSON-style lists directly
        """
        if value is None or value == []:
            return None
        if isinstance(value, str):
            s = value.strip()
            if s.startswith('[') and s.endswith(']'):
                try:
                    return list(ast.literal_eval(s))
                except (ValueError, SyntaxError):
                    raise ConfigError(f'Invalid list syntax: {value}')
            return [value]
        if isinstance(value, (list, tuple)):
            if len(value) == 1 and isinstance(value[0], str) and value[0].strip().startswith('['):
                return ScenePipeCLI.normalize_list(value[0])
            return list(value)
        return [value]

    def resolve_config(self, args: argparse.Namespace) -> TrainConfig:
        path = args.config or os.environ.get(CONFIG_ENV_VAR)
        return TrainConfig.from_dict(self.merge_config(args, read_config_file(path)))


def _coerce_list(key: str, value: list[Any] | None) -> list[Any]:
    if not value:
        raise ConfigError(f'{key} must not be empty')
    kind = type(getattr(_DEFAULTS, key)[0])
    try:
        return [kind(v) for v in value]
    except (TypeError, ValueError) as e:
        raise ConfigError(f'{key}: {e}') from e


def configure_logging(level: str = 'INFO', log_file: str | None = None) -> None:
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"Unknown log level '{level}'")
    logging.basicConfig(format=LOG_FORMAT, datefmt=LOG_DATEFMT, filename=log_file)
    logging.getLogger().setLevel(numeric)


# commands


def _cmd_finetune_gen(args: argparse.Namespace, cfg: TrainConfig) -> None:
    priors = PriorSet.from_config(cfg, kinds=('embedder', 'perceptual'))
    source = load_generators(args.source).g_s if args.source else None
    state = build_adapt_state(cfg, source)
    images = load_image_dir(args.anime_dir, state.g_s.resolution)
    if not images:
        raise ConfigError(f"No anime images in '{args.anime_dir}'")
    rng = seeded_rng(cfg.seed)
    finetune(state, stack_images(images), rng, priors, metrics_path=args.metrics)
    save_generators(args.out, state, rng)


def _cmd_gen_pairs(args: argparse.Namespace, cfg: TrainConfig) -> None:
    state = load_generators(args.ckpt)
    generate_pseudo_dataset(
        state.g_s,
        state.g_t,
        cfg.n_pairs,
        cfg.truncation,
        args.out,
        seeded_rng(cfg.seed),
        cfg.workers,
    )


def _cmd_filter_pairs(args: argparse.Namespace, cfg: TrainConfig) -> None:
    seg = build_prior('segmenter', cfg.segmenter, cfg.segmenter_weights)
    manifest = filter_dataset(Manifest.read(args.pairs_dir), seg, cfg.bce_threshold, cfg.workers)
    print(f'{len(manifest.kept())}/{len(manifest.rows)} pairs kept')


def _cmd_train(args: argparse.Namespace, cfg: TrainConfig) -> None:
    real = load_image_dir(args.real_dir, cfg.resolution)
    anime = load_image_dir(args.anime_dir, cfg.resolution)
    pairs = []
    if args.pairs_dir and cfg.use_supervised:
        manifest = Manifest.read(args.pairs_dir)
        pairs = [manifest.load_pair(row, cfg.resolution) for row in manifest.kept()]
    perceptual = (
        build_prior('perceptual', cfg.perceptual, cfg.perceptual_weights)
        if cfg.global_perceptual
        else None
    )
    train(cfg, real, anime, pairs, args.out, perceptual=perceptual, resume=args.resume)


def _cmd_infer(args: argparse.Namespace, cfg: TrainConfig) -> None:
    print(infer_batch(args.ckpt, args.in_dir, args.out, args.size))


def _cmd_eval_fid(args: argparse.Namespace, cfg: TrainConfig) -> None:
    print(f'{fid_from_dirs(args.set_a, args.set_b, build_extractor(cfg), args.size):.6f}')


def _cmd_eval_bce(args: argparse.Namespace, cfg: TrainConfig) -> None:
    seg = build_prior('segmenter', cfg.segmenter, cfg.segmenter_weights)
    if args.pairs_dir:
        value = dataset_bce(Manifest.read(args.pairs_dir), seg, args.size)
    elif args.outputs and args.references:
        value = bce_metric(
            load_image_dir(args.outputs, args.size), load_image_dir(args.references, args.size), seg
        )
    else:
        raise ConfigError('eval-bce needs --pairs-dir or both --outputs and --references')
    print(f'{value:.6f}')


def _cmd_show_config(args: argparse.Namespace, cfg: TrainConfig) -> None:
    print(cfg.to_json())


COMMANDS: dict[str, Callable[[argparse.Namespace, TrainConfig], None]] = {
    'finetune-gen': _cmd_finetune_gen,
    'gen-pairs': _cmd_gen_pairs,
    'filter-pairs': _cmd_filter_pairs,
    'train': _cmd_train,
    'infer': _cmd_infer,
    'eval-fid': _cmd_eval_fid,
    'eval-bce': _cmd_eval_bce,
    'show-config': _cmd_show_config,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; returns 0 on success, 2 on usage errors, 1 on failures."""
    cli = ScenePipeCLI()
    try:
        args = cli.parse(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    try:
        configure_logging(args.log_level, args.log_file)
        cfg = cli.resolve_config(args)
        logger.info('Resolved config:\n%s', cfg.to_json())
        COMMANDS[args.command](args, cfg)
    except Exception as e:
        logger.error(f'Error: {e}')
        return 1
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == '__main__':
    run()
