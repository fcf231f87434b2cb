import json
import math

import pytest

import scenepipe.__main__ as cli

from scenepipe._constants import CONFIG_ENV_VAR
from scenepipe.core import Manifest
from scenepipe.exceptions import ConfigError
from scenepipe.i2i import METRICS_NAME, lambda_sup

from tests.conftest import noise, write_rgb


def test_parse_collects_defaults(cli_instance):
    args = cli_instance.parse(['show-config', '--epochs', '3'])
    assert '_defaults' in vars(args)
    assert args._defaults['epochs'] == 20
    assert args._defaults['feature_layer_ids'] == [0, 4, 8, 12, 16]
    assert args.epochs == 3


def test_cli_explicit_overrides_config(cli_instance):
    """CLI explicit values must override config values."""
    args = cli_instance.parse(['show-config', '--epochs', '3'])
    merged = cli_instance.merge_config(args, {'epochs': 7, 'lambda_style': 0.2})
    assert merged['epochs'] == 3
    assert merged['lambda_style'] == 0.2


def test_cli_defaults_do_not_override_config(cli_instance):
    """CLI defaults must never override config values."""
    args = cli_instance.parse(['show-config'])
    merged = cli_instance.merge_config(args, {'epochs': 7})
    assert merged == {'epochs': 7}


def test_config_list_string_normalized(cli_instance):
    """Python-style list strings in config must normalize correctly."""
    args = cli_instance.parse(['show-config'])
    merged = cli_instance.merge_config(args, {'feature_layer_ids': '[0, 4, 8]'})
    assert merged['feature_layer_ids'] == [0, 4, 8]


def test_cli_list_replaces_config_list(cli_instance):
    """A list given on the command line replaces the configured one."""
    args = cli_instance.parse(['show-config', '--feature-layer-ids', '0', '4'])
    merged = cli_instance.merge_config(args, {'feature_layer_ids': [0, 8]})
    assert merged['feature_layer_ids'] == [0, 4]


def test_cli_python_style_list(cli_instance):
    args = cli_instance.parse(['show-config', '--i2i-betas', '[0.0, 0.9]'])
    assert cli_instance.merge_config(args, None)['i2i_betas'] == [0.0, 0.9]


@pytest.mark.parametrize(
    'value, expected',
    [
        (None, None),
        ([], None),
        ('[1, 2]', [1, 2]),
        ('3', ['3']),
        (['[1, 2]'], [1, 2]),
        (('a', 'b'), ['a', 'b']),
        (5, [5]),
    ],
)
def test_normalize_list(value, expected):
    assert cli.ScenePipeCLI.normalize_list(value) == expected


def test_normalize_list_invalid_syntax():
    with pytest.raises(ConfigError):
        cli.ScenePipeCLI.normalize_list('[0, 4,,]')


@pytest.mark.parametrize('bad', [[], ['a', 'b'], '[0, 4,,]'])
def test_bad_config_lists_are_rejected(cli_instance, bad):
    args = cli_instance.parse(['show-config'])
    with pytest.raises(ConfigError):
        cli_instance.merge_config(args, {'feature_layer_ids': bad})


def test_aliases_and_boolean_flags(cli_instance):
    args = cli_instance.parse(
        ['filter-pairs', '--pairs-dir', 'x', '--threshold', '1.5', '--no-use-supervised']
    )
    assert args.bce_threshold == 1.5
    assert args.use_supervised is False
    merged = cli_instance.merge_config(args, {'bce_threshold': 9.0})
    assert merged['bce_threshold'] == 1.5
    assert merged['use_supervised'] is False


def test_resolve_config_file_and_env(cli_instance, sample_cfg, monkeypatch):
    cfg = cli_instance.resolve_config(cli_instance.parse(['show-config', '--config', str(sample_cfg)]))
    assert (cfg.epochs, cfg.lambda_style, cfg.feature_layer_ids) == (7, 0.2, (0, 4, 8))

    monkeypatch.setenv(CONFIG_ENV_VAR, str(sample_cfg))
    from_env = cli_instance.resolve_config(cli_instance.parse(['show-config', '--epochs', '2']))
    assert (from_env.epochs, from_env.lambda_style) == (2, 0.2)


def test_main_show_config(capsys, sample_cfg):
    assert cli.main(['show-config', '--config', str(sample_cfg), '--lambda-src', '0.3']) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown['epochs'] == 7
    assert shown['lambda_src'] == 0.3
    assert shown['feature_layer_ids'] == [0, 4, 8]


@pytest.mark.parametrize('argv', [[], ['bogus'], ['infer', '--out', 'x']])
def test_main_usage_errors(argv):
    assert cli.main(argv) == 2


def test_main_reports_failures(tmp_path):
    assert cli.main(['show-config', '--config', str(tmp_path / 'missing.json')]) == 1
    assert cli.main(['show-config', '--truncation', '2']) == 1
    assert cli.main(['show-config', '--log-level', 'LOUD']) == 1


def test_main_filter_pairs(capsys, pair_dir):
    assert cli.main(['filter-pairs', '--pairs-dir', str(pair_dir), '--threshold', '5']) == 0
    assert capsys.readouterr().out.strip() == '1/2 pairs kept'
    assert cli.main(['filter-pairs', '--pairs-dir', str(pair_dir), '--threshold', '100']) == 0
    assert capsys.readouterr().out.strip() == '2/2 pairs kept'


def test_desk_pipeline_end_to_end(tmp_path, capsys, tiny_cfg, image_dir, pair_dir):
    """Runs every stage on tiny models with the mock priors."""
    cfg = str(tiny_cfg.override(epochs=1, n_pairs=3).save(tmp_path / 'desk.json'))
    gen_ckpt = tmp_path / 'gen.pt'
    pairs = tmp_path / 'pairs'
    run_dir = tmp_path / 'run'
    out = tmp_path / 'out'

    assert cli.main(['finetune-gen', '--config', cfg, '--anime-dir', str(image_dir), '--out', str(gen_ckpt),
                     '--metrics', str(tmp_path / 'ft.jsonl')]) == 0
    assert len((tmp_path / 'ft.jsonl').read_text().splitlines()) == 2

    assert cli.main(['gen-pairs', '--config', cfg, '--ckpt', str(gen_ckpt), '--out', str(pairs)]) == 0
    assert len(Manifest.read(pairs).rows) == 3

    assert cli.main(['filter-pairs', '--config', cfg, '--pairs-dir', str(pairs)]) == 0
    assert all(r.bce_score is not None for r in Manifest.read(pairs).rows)

    assert cli.main(['train', '--config', cfg, '--real-dir', str(image_dir), '--anime-dir', str(image_dir),
                     '--pairs-dir', str(pair_dir), '--out', str(run_dir)]) == 0
    assert (run_dir / 'latest.pt').is_file()

    capsys.readouterr()
    assert cli.main(['infer', '--config', cfg, '--ckpt', str(run_dir / 'latest.pt'), '--in', str(image_dir),
                     '--out', str(out)]) == 0
    assert capsys.readouterr().out.strip() == '3'
    assert sorted(p.name for p in out.iterdir()) == ['frame1.png', 'frame10.png', 'frame2.png']

    assert cli.main(['eval-fid', '--config', cfg, '--set-a', str(image_dir), '--set-b', str(out)]) == 0
    assert float(capsys.readouterr().out) >= 0

    assert cli.main(['eval-bce', '--config', cfg, '--outputs', str(out), '--references', str(image_dir)]) == 0
    assert float(capsys.readouterr().out) >= 0
    assert cli.main(['eval-bce', '--config', cfg, '--pairs-dir', str(pairs)]) == 0
    assert float(capsys.readouterr().out) >= 0
    assert cli.main(['eval-bce', '--config', cfg]) == 1


ADVERSARIAL_TERMS = ('g_adv', 'd_adv', 'd_u', 'd_p', 'unsup_gan', 'sup_cgan')


@pytest.fixture
def desk_images(tmp_path):
    """64 synthetic 64px training images."""
    d = tmp_path / 'desk_images'
    for i in range(64):
        write_rgb(d / f'img{i:02d}.png', noise(100 + i, 64))
    return d


def _run_desk_chain(root, cfg_obj, images):
    """finetune-gen, gen-pairs, filter-pairs and train into ``root``; returns the two metric logs."""
    cfg = str(cfg_obj.save(root / 'desk.json'))
    ft_log = root / 'finetune.jsonl'
    pairs = root / 'pairs'
    assert cli.main(['finetune-gen', '--config', cfg, '--anime-dir', str(images), '--out', str(root / 'gen.pt'),
                     '--metrics', str(ft_log)]) == 0
    assert cli.main(['gen-pairs', '--config', cfg, '--ckpt', str(root / 'gen.pt'), '--out', str(pairs)]) == 0
    assert cli.main(['filter-pairs', '--config', cfg, '--pairs-dir', str(pairs), '--threshold', 'inf']) == 0
    assert Manifest.read(pairs).kept()
    assert cli.main(['train', '--config', cfg, '--real-dir', str(images), '--anime-dir', str(images),
                     '--pairs-dir', str(pairs), '--out', str(root / 'run')]) == 0
    return ft_log, root / 'run' / METRICS_NAME


@pytest.fixture
def desk_cfg(tiny_cfg):
    """Five-block 64px generator, 200 fine-tune steps, 50 pairs, two translation epochs."""
    return tiny_cfg.override(gen_blocks=5, finetune_iters=200, n_pairs=50, resolution=64, epochs=2)


def test_desk_chain_losses_stay_bounded(tmp_path, desk_cfg, desk_images):
    ft_log, train_log = _run_desk_chain(tmp_path, desk_cfg, desk_images)
    ft_records = [json.loads(line) for line in ft_log.read_text().splitlines()]
    train_records = [json.loads(line) for line in train_log.read_text().splitlines()]
    assert len(ft_records) == 200
    assert len(train_records) == 2 * 64

    for record in ft_records + train_records:
        for key, value in record.items():
            if isinstance(value, str):
                continue
            assert math.isfinite(value), key
            if key in ADVERSARIAL_TERMS:
                assert value < 100, key

    first = [r for r in train_records if r['epoch'] == 1]
    second = [r for r in train_records if r['epoch'] == 2]
    assert all(r['lambda_sup'] == 1.0 and r['sup_cgan'] > 0 for r in first)
    assert all(r['lambda_sup'] == lambda_sup(2) for r in second)
    assert lambda_sup(2) < 1


def test_desk_chain_is_deterministic(tmp_path, desk_cfg, desk_images):
    logs = [_run_desk_chain(tmp_path / name, desk_cfg, desk_images) for name in ('a', 'b')]
    (ft_a, train_a), (ft_b, train_b) = logs
    assert ft_a.read_bytes() == ft_b.read_bytes()
    assert train_a.read_bytes() == train_b.read_bytes()
