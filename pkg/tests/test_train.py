import json
import math
import random

import numpy as np
import pytest
import torch

from stdaseg import losses as L
from stdaseg.checkpoint import MAGIC, Checkpoint, CheckpointError
from stdaseg.data import (
    ISPRS_CLASSES,
    ISPRS_PALETTE,
    DatasetError,
    RawTile,
    ShiftSpec,
    batch_indices,
    decode_label,
    manifest_from_tiles,
    synth_dataset,
)
from stdaseg.network import segment
from stdaseg.train import (
    TrainConfig,
    TrainState,
    build_ensemble,
    evaluate,
    fit,
    read_log,
    train_step,
)

TINY = dict(channels=8, downsample=2, batch_size=2, patch_size=32, max_iters=4)


@pytest.fixture(scope="module")
def synth():
    return synth_dataset(11, 2, ShiftSpec((2, 0, 1)), tile_size=64, patch_size=32, stride=32)


def same_params(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


# --------------------------------------------------------------------- config


def test_config_defaults_follow_reported_settings():
    c = TrainConfig()
    assert (c.main_optimizer, c.main_lr, c.main_momentum, c.main_weight_decay) == ("sgd", 1e-3, 0.9, 1e-4)
    assert (c.disc_optimizer, c.disc_lr) == ("adam", 2.5e-4)
    assert (c.lam, c.beta, c.alpha) == (0.25, 0.005, 0.99)


def test_config_round_trip(tmp_path):
    c = TrainConfig(lam=0.1, seed=3, paradigm="single_target")
    c.save(tmp_path / "c.json")
    raw = json.loads((tmp_path / "c.json").read_text())
    assert raw["lambda"] == 0.1 and "lam" not in raw and raw["schema_version"] == 1
    assert TrainConfig.load(tmp_path / "c.json") == c


@pytest.mark.parametrize("bad", [dict(main_lr=0), dict(lam=-1), dict(beta=-0.1), dict(alpha=1.01), dict(paradigm="x")])
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 0.1})


# --------------------------------------------------------------------- train_step


def batches(manifest, cfg, step, seed_offset=0, labels=True):
    idx = batch_indices(len(manifest), cfg.batch_size, cfg.seed + seed_offset, step)
    return manifest.load_batch(idx, with_labels=labels)


def test_zero_weights_equal_plain_supervised_loop(synth):
    src, tgt = synth
    cfg = TrainConfig(**TINY, lam=0.0, beta=0.0)
    state = TrainState(cfg)
    twin = build_ensemble(cfg)
    assert same_params(state.ensemble, twin)
    opt = torch.optim.SGD(twin.student_parameters(), lr=cfg.main_lr, momentum=cfg.main_momentum, weight_decay=cfg.main_weight_decay)
    for step in range(cfg.max_iters):
        xs, ys = batches(src, cfg, step)
        xt, _ = batches(tgt, cfg, step, 1, labels=False)
        _, bundle = train_step(state, (xs, ys), xt)

        size = tuple(xs.shape[-2:])
        d_s, d_t = twin.ddm(twin.backbone_s(xs), twin.backbone_t(xs))
        seg_s = L.seg_loss(segment(twin.decoder_s, d_s, size), ys)
        seg_t = L.seg_loss(segment(twin.decoder_t, d_t, size), ys)
        opt.zero_grad()
        (seg_s + seg_t).backward()
        opt.step()
        rec = bundle.record()
        assert rec["seg_S"] == seg_s.item() and rec["seg_T"] == seg_t.item()
        assert rec["st_S"] == rec["adv_T"] == 0.0
    assert same_params(state.ensemble, twin)


def test_step_moves_exactly_the_parameters_with_gradient(synth):
    src, tgt = synth
    cfg = TrainConfig(**TINY, lam=0.0, beta=0.0, main_weight_decay=0.0)
    state = TrainState(cfg)
    before = {k: v.clone() for k, v in state.ensemble.state_dict().items()}
    xs, ys = batches(src, cfg, 0)
    xt, _ = batches(tgt, cfg, 0, 1, labels=False)
    train_step(state, (xs, ys), xt)
    after = state.ensemble.state_dict()
    for k in before:
        moved = not torch.equal(before[k], after[k])
        if k.startswith("disc_"):
            assert not moved, k  # beta = 0: no discriminator step, no adversarial gradient
        elif k.startswith(("backbone", "decoder")):
            assert moved, k


def test_teacher_only_receives_ema(synth):
    src, tgt = synth
    cfg = TrainConfig(**TINY, alpha=0.5)
    state = TrainState(cfg)
    student_before = {k: v.clone() for k, v in state.ensemble.decoder_s.state_dict().items()}
    teacher_before = {k: v.clone() for k, v in state.teacher.decoder_s.state_dict().items()}
    xs, ys = batches(src, cfg, 0)
    xt, _ = batches(tgt, cfg, 0, 1, labels=False)
    train_step(state, (xs, ys), xt)
    for k, v in state.teacher.decoder_s.state_dict().items():
        torch.testing.assert_close(v, 0.5 * teacher_before[k] + 0.5 * student_before[k], rtol=0, atol=0)
    teacher_ids = {id(p) for p in state.teacher.parameters()}
    opt_ids = {id(p) for opt in (state.opt_main, state.opt_disc) for g in opt.param_groups for p in g["params"]}
    assert not teacher_ids & opt_ids


def test_optimizer_groups_are_disjoint():
    state = TrainState(TrainConfig(**TINY))
    main = {id(p) for g in state.opt_main.param_groups for p in g["params"]}
    disc = {id(p) for g in state.opt_disc.param_groups for p in g["params"]}
    assert not main & disc
    assert disc == {id(p) for p in state.ensemble.disc_parameters()}
    assert main == {id(p) for p in state.ensemble.student_parameters()}


def test_discriminator_step_leaves_students_alone(synth):
    src, tgt = synth
    cfg = TrainConfig(**TINY, lam=0.0, beta=1.0, main_lr=1e-12, main_momentum=0.0, main_weight_decay=0.0)
    state = TrainState(cfg)
    disc_before = {k: v.clone() for k, v in state.ensemble.disc_s.state_dict().items()}
    xs, ys = batches(src, cfg, 0)
    xt, _ = batches(tgt, cfg, 0, 1, labels=False)
    _, bundle = train_step(state, (xs, ys), xt)
    assert not same_params_dict(disc_before, state.ensemble.disc_s.state_dict())
    rec = bundle.record()
    assert rec["disc_S"] > 0 and rec["disc_T"] > 0 and rec["adv_S"] > 0
    assert rec["combined"] == pytest.approx(rec["seg_S"] + rec["seg_T"] + rec["adv_S"] + rec["adv_T"], rel=1e-6)


def same_params_dict(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


def test_single_target_skips_source_student_st(synth):
    src, tgt = synth
    cfg = TrainConfig(**TINY, paradigm="single_target")
    state = TrainState(cfg)
    xs, ys = batches(src, cfg, 0)
    xt, _ = batches(tgt, cfg, 0, 1, labels=False)
    _, bundle = train_step(state, (xs, ys), xt)
    rec = bundle.record()
    assert rec["st_S"] == 0.0 and rec["st_T"] > 0


def test_non_finite_loss_aborts_with_step(synth):
    src, _ = synth
    cfg = TrainConfig(**TINY)
    state = TrainState(cfg)
    xs, ys = batches(src, cfg, 0)
    xs[0, 0, 0, 0] = float("nan")
    with pytest.raises(L.NonFiniteLossError, match="step 0"):
        train_step(state, (xs, ys), xs.clone())


def test_empty_batch_rejected():
    state = TrainState(TrainConfig(**TINY))
    empty = torch.zeros(0, 3, 32, 32)
    with pytest.raises(ValueError):
        train_step(state, (empty, torch.zeros(0, 32, 32, dtype=torch.long)), empty)


# --------------------------------------------------------------------- fit


def test_zero_iterations_returns_initialisation(synth):
    cfg = TrainConfig(**dict(TINY, max_iters=0))
    ckpt = fit(cfg, *synth)
    init = build_ensemble(cfg).state_dict()
    for k, v in init.items():
        assert torch.equal(ckpt.tensors[f"ensemble/{k}"], v)
    assert ckpt.meta["step"] == 0 and ckpt.meta["history"] == []


def test_fit_writes_outputs_and_one_record_per_step(synth, tmp_path):
    cfg = TrainConfig(**dict(TINY, checkpoint_interval=2))
    fit(cfg, *synth, out_dir=tmp_path)
    log = read_log(tmp_path / "train_log.jsonl")
    assert [r["step"] for r in log] == [0, 1, 2, 3]
    assert set(log[0]) == {"step", "seg_S", "seg_T", "st_S", "st_T", "adv_S", "adv_T", "disc_S", "disc_T", "combined"}
    assert TrainConfig.load(tmp_path / "config.json") == cfg
    assert {p.name for p in tmp_path.glob("*.bin")} == {"ckpt_000002.bin", "ckpt_000004.bin", "final.bin"}


def test_resume_matches_unbroken_run(synth, tmp_path):
    cfg = TrainConfig(**dict(TINY, max_iters=6, checkpoint_interval=3))
    full = fit(cfg, *synth, out_dir=tmp_path / "a")
    resumed = fit(cfg, *synth, out_dir=tmp_path / "b", resume=tmp_path / "a" / "ckpt_000003.bin")
    assert full.tensors.keys() == resumed.tensors.keys()
    for k in full.tensors:
        assert torch.equal(full.tensors[k], resumed.tensors[k]), k
    assert full.meta["history"][3:] == resumed.meta["history"]


def test_fit_rejects_bad_manifest_before_training(synth):
    src, tgt = synth
    with pytest.raises(ValueError, match="too small"):
        fit(TrainConfig(**dict(TINY, downsample=4)), src, tgt)
    with pytest.raises(DatasetError, match="patch size"):
        fit(TrainConfig(**dict(TINY, patch_size=64)), src, tgt)
    unlabeled = manifest_from_tiles([RawTile(t.pixels, None, t.tile_id) for t in src.tiles.values()], 32, 32)
    with pytest.raises(DatasetError, match="labels"):
        fit(TrainConfig(**TINY), unlabeled, tgt)


def test_single_path_baseline_trains(synth):
    cfg = TrainConfig(**TINY, dual_path=False, use_ddm=False, lam=0.0, beta=0.0)
    ckpt = fit(cfg, *synth)
    rec = ckpt.meta["history"][-1]
    assert rec["seg_T"] == 0.0 and rec["seg_S"] > 0
    report = evaluate(ckpt, synth[1])
    assert 0.0 <= report.miou <= 1.0


# --------------------------------------------------------------------- checkpoint format


def test_checkpoint_round_trip_is_bit_exact(synth, tmp_path):
    cfg = TrainConfig(**TINY)
    ckpt = fit(cfg, *synth)
    ckpt.tensors["extra/u8"] = torch.arange(5, dtype=torch.uint8)
    ckpt.tensors["extra/f64"] = torch.tensor([math.pi, -0.0, 1e-300], dtype=torch.float64)
    path = tmp_path / "c.bin"
    ckpt.save(path)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    back = Checkpoint.load(path)
    assert back.meta == json.loads(json.dumps(ckpt.meta))
    for k, v in ckpt.tensors.items():
        assert back.tensors[k].dtype == v.dtype and torch.equal(back.tensors[k], v), k
    state = TrainState.from_checkpoint(back)
    assert state.step == cfg.max_iters and state.teacher.step == ckpt.meta["teacher"]["step"]


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOTACKPT" + b"\0" * 32)
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "x.bin")


# --------------------------------------------------------------------- evaluate


def echo_fixture(seed=0, n_tiles=3, size=16):
    """Images that are the colour-coded labels themselves."""
    g = np.random.default_rng(seed)
    tiles = []
    for i in range(n_tiles):
        label = g.integers(0, 6, size=(size, size))
        tiles.append(RawTile(decode_label(label, ISPRS_PALETTE), label, f"t{i}"))
    manifest = manifest_from_tiles(tiles, 8, 8, ISPRS_CLASSES, ISPRS_PALETTE)
    cfg = TrainConfig(
        backbone_kind="identity", decoder_kind="palette_nearest", channels=3, downsample=1,
        use_ddm=False, patch_size=8, palette=[list(c) for c in ISPRS_PALETTE],
    )
    return manifest, cfg


def test_label_echo_stub_scores_perfectly():
    manifest, cfg = echo_fixture()
    report = evaluate(TrainState(cfg), manifest)
    assert report.miou == 1.0 and report.mf1 == 1.0


def test_evaluation_is_order_independent(synth):
    _, tgt = synth
    ens = build_ensemble(TrainConfig(**TINY))
    a = evaluate(ens, tgt, batch_size=3)
    shuffled = manifest_from_tiles(list(tgt.tiles.values()), 32, 32, tgt.class_names, tgt.palette, "target")
    random.Random(0).shuffle(shuffled.patches)
    b = evaluate(ens, shuffled, batch_size=2)
    assert a.to_json() == b.to_json()


class ConstantDecoder(torch.nn.Module):
    def __init__(self, num_classes, cls, in_channels):
        super().__init__()
        self.num_classes, self.cls, self.in_channels = num_classes, cls, in_channels

    def forward(self, features, out_size):
        out = torch.zeros(features.shape[0], self.num_classes, *out_size, dtype=features.dtype)
        out[:, self.cls] = 1.0
        return out


def test_constant_class_stub_matches_hand_confusion():
    manifest, cfg = echo_fixture(seed=4, n_tiles=1, size=8)
    label = next(iter(manifest.tiles.values())).label
    ens = build_ensemble(cfg)
    ens.decoder_s = ConstantDecoder(6, 0, 3)
    ens.decoder_t = ConstantDecoder(6, 0, 3)
    report = evaluate(ens, manifest)
    support = np.bincount(label.ravel(), minlength=6)
    expect = np.zeros((6, 6), dtype=int)
    expect[:, 0] = support
    assert report.confusion == expect.tolist()
    assert report.iou[0] == support[0] / support.sum()
    assert report.f1[0] == 2 * support[0] / (support[0] + support.sum())
    for k in range(1, 6):
        assert report.iou[k] == (0.0 if support[k] else report.iou[k])


def test_evaluate_requires_labels(synth):
    src, _ = synth
    unlabeled = manifest_from_tiles([RawTile(t.pixels, None, t.tile_id) for t in src.tiles.values()], 32, 32)
    with pytest.raises(DatasetError):
        evaluate(build_ensemble(TrainConfig(**TINY)), unlabeled)
