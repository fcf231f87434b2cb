import json
import math

import pytest
import torch

from pathlib import Path

import scenepipe.i2i as i2i

from scenepipe.core import PseudoPair, TrainConfig, seeded_init, seeded_rng
from scenepipe.exceptions import AlignmentError, ArgumentError, CheckpointError, ConfigError, ShapeError
from scenepipe.i2i import (
    LATEST_NAME,
    METRICS_NAME,
    PatchDiscriminator,
    ProjectionHeads,
    TranslationGenerator,
    build_train_state,
    extract_patch_features,
    lambda_sup,
    load_checkpoint,
    save_checkpoint,
    supervised_branch_loss,
    train,
    train_epoch,
    translate,
    unsupervised_branch_loss,
)


def rand_img(seed: int, size: int = 32) -> torch.Tensor:
    return torch.rand(3, size, size, generator=seeded_rng(seed)) * 2 - 1


@pytest.fixture
def data() -> tuple[list, list, list]:
    real = [rand_img(s) for s in (1, 2)]
    anime = [rand_img(s) for s in (3, 4)]
    pairs = [PseudoPair(rand_img(5), rand_img(6), seed=5)]
    return real, anime, pairs


def params(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in module.named_parameters()}


def test_translate_preserves_shape() -> None:
    with seeded_init(0):
        g = TranslationGenerator(ngf=4, n_res_blocks=1, layer_ids=(0, 4, 8, 12))
    out = translate(g, torch.rand(3, 256, 512, generator=seeded_rng(0)) * 2 - 1)
    assert out.shape == (3, 256, 512)
    assert out.abs().max() <= 1
    batch = translate(g, torch.zeros(2, 3, 32, 32))
    assert batch.shape == (2, 3, 32, 32)
    with pytest.raises(ShapeError):
        translate(g, torch.zeros(3, 30, 32))
    with pytest.raises(ShapeError, match='below'):
        translate(g, torch.zeros(3, 4, 8))


def test_generator_layer_taps() -> None:
    g = TranslationGenerator(ngf=4)
    assert len(g.model) == 32
    assert g.feature_channels() == [3, 8, 16, 16, 16]
    assert [f.shape[-1] for f in g.encode(torch.zeros(1, 3, 32, 32))] == [38, 32, 16, 8, 8]
    with pytest.raises(ConfigError):
        TranslationGenerator(ngf=4, n_res_blocks=1, layer_ids=(0, 40))


def test_patch_discriminator_maps() -> None:
    assert PatchDiscriminator(3, 8)(torch.zeros(1, 3, 32, 32)).shape == (1, 1, 2, 2)
    assert PatchDiscriminator(6, 8)(torch.zeros(2, 6, 64, 64)).shape == (2, 1, 6, 6)


def test_lambda_sup_cosine() -> None:
    assert lambda_sup(1, 20) == 1.0
    assert lambda_sup(20, 20) == pytest.approx(0.07846, abs=1e-5)
    values = [lambda_sup(t, 20) for t in range(1, 21)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert all(v > 0 for v in values)
    assert lambda_sup(11, 20) == pytest.approx(math.cos(math.pi / 4))


def test_lambda_sup_other_schedules() -> None:
    assert lambda_sup(7, 20, 'constant') == 1.0
    assert lambda_sup(1, 20, 'zero') == 0.0
    with pytest.raises(ArgumentError):
        lambda_sup(0)
    with pytest.raises(ArgumentError):
        lambda_sup(1, 20, 'linear')


def test_lambda_sup_period_is_independent_of_run_length(tiny_cfg: TrainConfig, data) -> None:
    assert lambda_sup(2) == pytest.approx(math.cos(math.pi / 40))
    assert lambda_sup(3, 2) == pytest.approx(0.0, abs=1e-12)
    assert lambda_sup(5, 2) == 0.0
    with pytest.raises(ArgumentError):
        lambda_sup(1, 0)

    real, anime, pairs = data
    state = build_train_state(tiny_cfg)
    state, _ = train_epoch(state, real, anime, pairs, 1, tiny_cfg, seeded_rng(1))
    _, summary = train_epoch(state, real, anime, pairs, 2, tiny_cfg, seeded_rng(2))
    assert tiny_cfg.epochs == 2
    assert summary['lambda_sup'] == pytest.approx(0.99692, abs=1e-5)
    assert all(r['lambda_sup'] == summary['lambda_sup'] for r in summary['records'])


def test_extract_patch_features(tiny_cfg: TrainConfig) -> None:
    state = build_train_state(tiny_cfg)
    img = rand_img(0)
    first = extract_patch_features(state.g, state.heads, img, 16, seeded_rng(0))
    assert first.layer_ids == (0, 4, 8, 12, 16)
    assert all(lp.features.shape == (1, 16, 16) for lp in first.layers)

    again = extract_patch_features(state.g, state.heads, rand_img(1), 16, seeded_rng(9), reuse_locations=first)
    assert again.aligned_with(first)

    single = extract_patch_features(state.g, state.heads, img, 1, seeded_rng(0))
    assert all(lp.n_patches == 1 for lp in single.layers)


def test_extract_patch_features_limits(tiny_cfg: TrainConfig) -> None:
    state = build_train_state(tiny_cfg)
    img = rand_img(0)
    with pytest.raises(ShapeError):
        extract_patch_features(state.g, state.heads, img, 100, seeded_rng(0))
    capped = extract_patch_features(state.g, state.heads, img, 100, seeded_rng(0), strict=False)
    assert [lp.n_patches for lp in capped.layers] == [100, 100, 100, 64, 64]

    with seeded_init(0):
        other = TranslationGenerator(ngf=4, layer_ids=(0, 4, 8))
    foreign = extract_patch_features(
        other, ProjectionHeads(other.feature_channels(), 16), img, 4, seeded_rng(0)
    )
    with pytest.raises(AlignmentError):
        extract_patch_features(state.g, state.heads, img, 4, seeded_rng(0), reuse_locations=foreign)


def test_supervised_branch_report(tiny_cfg: TrainConfig) -> None:
    state = build_train_state(tiny_cfg)
    pair = PseudoPair(rand_img(1), rand_img(2), seed=0)
    loss = supervised_branch_loss(state.g, state.heads, state.d_p, pair, tiny_cfg, seeded_rng(0))
    report = loss.report()
    assert set(report.terms) == {'cgan', 'style'}
    assert report.weights == {'cgan': 1.0, 'style': tiny_cfg.lambda_style}
    assert report.weighted_sum() == pytest.approx(report.total, rel=1e-5)
    assert report.terms['style'] > 0
    assert loss.features[0].aligned_with(loss.features[1])


def test_supervised_l1_variant_at_ground_truth(tiny_cfg: TrainConfig) -> None:
    cfg = tiny_cfg.override(sup_variant='l1')
    state = build_train_state(cfg)
    pair = PseudoPair(rand_img(1), rand_img(2), seed=0)
    loss = supervised_branch_loss(
        state.g, state.heads, state.d_p, pair, cfg, seeded_rng(0), fake=pair.y_p.unsqueeze(0)
    )
    assert loss.terms['style'].item() == 0.0
    assert loss.features == ()


def test_unsupervised_branch_identity_has_no_relation_loss(tiny_cfg: TrainConfig) -> None:
    state = build_train_state(tiny_cfg)
    x = rand_img(1)
    loss = unsupervised_branch_loss(
        state.g, state.heads, state.d_u, x, rand_img(2), tiny_cfg, seeded_rng(0), fake=x.unsqueeze(0)
    )
    report = loss.report()
    assert set(report.terms) == {'gan', 'src', 'hdce'}
    assert report.terms['src'] == pytest.approx(0.0, abs=1e-7)
    assert report.terms['hdce'] > 0
    assert report.weighted_sum() == pytest.approx(report.total, rel=1e-5)


def test_unsupervised_branch_perceptual_term(tiny_cfg: TrainConfig, priors) -> None:
    cfg = tiny_cfg.override(global_perceptual=True, lambda_perceptual=0.5)
    state = build_train_state(cfg)
    loss = unsupervised_branch_loss(
        state.g, state.heads, state.d_u, rand_img(1), rand_img(2), cfg, seeded_rng(0),
        perceptual=priors.perceptual,
    )
    assert loss.weights['perceptual'] == 0.5
    assert 'perceptual' in loss.terms
    with pytest.raises(ConfigError):
        unsupervised_branch_loss(state.g, state.heads, state.d_u, rand_img(1), rand_img(2), cfg, seeded_rng(0))


def test_train_epoch_records(tmp_path: Path, tiny_cfg: TrainConfig, data) -> None:
    real, anime, pairs = data
    state = build_train_state(tiny_cfg)
    before = params(state.g)
    metrics = tmp_path / 'm.jsonl'

    state, summary = train_epoch(state, real, anime, pairs, 1, tiny_cfg, seeded_rng(1), metrics_path=metrics)

    assert state.epoch == 1
    assert summary['lambda_sup'] == 1.0
    records = summary['records']
    assert [r['iter'] for r in records] == [1, 2]
    assert {'d_u', 'd_p', 'unsup_gan', 'unsup_src', 'unsup_hdce', 'sup_cgan', 'sup_style', 'total'} <= set(records[0])
    assert all(math.isfinite(v) for r in records for v in r.values())
    assert [json.loads(line) for line in metrics.read_text().splitlines()] == records
    assert any(not torch.equal(p, before[n]) for n, p in state.g.named_parameters())


def test_train_epoch_with_zero_weight_ignores_pairs(tiny_cfg: TrainConfig, data, mocker) -> None:
    real, anime, pairs = data
    cfg = tiny_cfg.override(sup_schedule='zero')
    spy = mocker.spy(i2i, 'supervised_branch_loss')
    a = build_train_state(cfg)
    b = build_train_state(cfg)
    d_p_before = params(a.d_p)

    _, sa = train_epoch(a, real, anime, pairs, 1, cfg, seeded_rng(1))
    _, sb = train_epoch(b, real, anime, [], 1, cfg, seeded_rng(1))

    spy.assert_not_called()
    assert sa['records'] == sb['records']
    for name, p in a.g.named_parameters():
        assert torch.equal(p, dict(b.g.named_parameters())[name])
    assert all(torch.equal(p, d_p_before[n]) for n, p in a.d_p.named_parameters())


def test_train_epoch_without_unsupervised_branch(tiny_cfg: TrainConfig, data) -> None:
    real, anime, pairs = data
    cfg = tiny_cfg.override(use_unsupervised=False)
    state = build_train_state(cfg)
    d_u_before = params(state.d_u)
    _, summary = train_epoch(state, real, anime, pairs, 1, cfg, seeded_rng(1))
    assert all(r['unsup_gan'] == 0.0 and r['d_u'] == 0.0 for r in summary['records'])
    assert all(torch.equal(p, d_u_before[n]) for n, p in state.d_u.named_parameters())
    with pytest.raises(ConfigError):
        train_epoch(state, real, anime, pairs, 1, cfg.override(use_supervised=False), seeded_rng(1))


def test_train_epoch_argument_errors(tiny_cfg: TrainConfig, data) -> None:
    real, anime, pairs = data
    state = build_train_state(tiny_cfg)
    with pytest.raises(ArgumentError):
        train_epoch(state, real, anime, pairs, 3, tiny_cfg, seeded_rng(0))
    with pytest.raises(ConfigError):
        train_epoch(state, [], anime, pairs, 1, tiny_cfg, seeded_rng(0))
    with pytest.raises(ConfigError):
        train_epoch(state, real, anime, [], 1, tiny_cfg, seeded_rng(0))


def test_checkpoint_round_trip(tmp_path: Path, tiny_cfg: TrainConfig, data) -> None:
    real, anime, pairs = data
    state, _ = train_epoch(build_train_state(tiny_cfg), real, anime, pairs, 1, tiny_cfg, seeded_rng(1))
    path = save_checkpoint(state, tmp_path / 'ckpt.pt')
    loaded = load_checkpoint(path)

    assert loaded.epoch == 1
    assert loaded.cfg == tiny_cfg
    for name in ('g', 'heads', 'd_u', 'd_p'):
        ours, theirs = getattr(state, name).state_dict(), getattr(loaded, name).state_dict()
        assert ours.keys() == theirs.keys()
        assert all(torch.equal(ours[k], theirs[k]) for k in ours)
    x = rand_img(7)
    assert torch.equal(translate(state.g, x), translate(loaded.g, x))
    adam = loaded.optimizers['g'].state_dict()['state']
    assert adam and all(int(s['step']) == 2 for s in adam.values())

    truncated = tmp_path / 'trunc.pt'
    truncated.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)


def test_load_checkpoint_rejects_mismatched_architecture(tmp_path: Path, tiny_cfg: TrainConfig) -> None:
    path = save_checkpoint(build_train_state(tiny_cfg), tmp_path / 'ckpt.pt')
    blob = torch.load(path, weights_only=True)
    blob['arch']['generator']['ngf'] = 2 * tiny_cfg.ngf
    torch.save(blob, path)
    with pytest.raises(CheckpointError, match='architecture'):
        load_checkpoint(path)


def test_train_resume_matches_uninterrupted_run(tmp_path: Path, tiny_cfg: TrainConfig, data) -> None:
    real, anime, pairs = data
    full = train(tiny_cfg, real, anime, pairs, tmp_path / 'full')
    assert [m['epoch'] for m in full.epochs] == [1, 2]
    assert (tmp_path / 'full' / 'epoch_001.pt').is_file()
    assert (tmp_path / 'full' / LATEST_NAME).is_file()
    assert len((tmp_path / 'full' / METRICS_NAME).read_text().splitlines()) == 4

    resumed = train(
        tiny_cfg, real, anime, pairs, tmp_path / 'resumed', resume=tmp_path / 'full' / 'epoch_001.pt'
    )
    assert [m['epoch'] for m in resumed.epochs] == [2]
    assert resumed.state.epoch == 2
    theirs = dict(resumed.state.g.named_parameters())
    for name, p in full.state.g.named_parameters():
        assert torch.allclose(p, theirs[name], atol=1e-6), name
    totals = [r['total'] for r in resumed.epochs[0]['records']]
    assert totals == pytest.approx([r['total'] for r in full.epochs[1]['records']], abs=1e-5)


def test_build_train_state_is_seeded(tiny_cfg: TrainConfig) -> None:
    a = build_train_state(tiny_cfg)
    b = build_train_state(tiny_cfg)
    c = build_train_state(tiny_cfg.override(seed=1))
    assert all(torch.equal(p, q) for p, q in zip(a.g.parameters(), b.g.parameters()))
    assert not all(torch.equal(p, q) for p, q in zip(a.g.parameters(), c.g.parameters()))
    assert a.d_p.in_channels == 6 and a.d_u.in_channels == 3
