import json

import numpy as np
import pytest

from usjepa.frames import synth_frame
from usjepa.masking import BlockConstraints, MaskSampler, MaskSet, PatchGrid
from usjepa.model import ModelStack, TeacherMode, encode_target
from usjepa.numerics.optim import AdamW, OptimizerConfig
from usjepa.objective import (LossConfig, Trainer, batch_loss, best_epoch, fixed_val_masks, pack_batch, smooth_l1,
                              train_step, us_jepa_loss, validate)

from conftest import TINY_ENC, TINY_PRED
from helpers import fd_check, perturbed_stack_pair

SAMPLER = MaskSampler(PatchGrid(32, 32, 8), BlockConstraints((0.1, 0.3), count=2, tau=1),
                      BlockConstraints((0.85, 1.0), tau=1))


def _masks(n, seed=0):
    rng = np.random.default_rng(seed)
    return [SAMPLER.sample(None, rng) for _ in range(n)]


def _frames(n, seed=0):
    out = [synth_frame(i % 3, seed * 1000 + i, size=32)[0] for i in range(n)]
    return np.stack(out).astype(np.float32)


def test_smooth_l1_examples():
    assert float(smooth_l1(np.array([0.5]), np.array([0.0])).data) == pytest.approx(0.125)
    assert float(smooth_l1(np.array([2.0]), np.array([0.0])).data) == pytest.approx(1.5)
    assert float(smooth_l1(np.array([2.0]), np.array([0.0]), beta=4.0).data) == pytest.approx(0.5)


def test_us_jepa_loss_mean_over_blocks():
    cfg = LossConfig("l1")
    preds = [np.full((2, 3), 0.2), np.full((5, 3), 0.4)]
    ys = [np.zeros((2, 3)), np.zeros((5, 3))]
    assert float(us_jepa_loss(preds, ys, cfg).data) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        us_jepa_loss([], [])
    with pytest.raises(ValueError):
        LossConfig("l2")


def test_us_jepa_loss_matches_brute_force():
    rng = np.random.default_rng(4)
    preds = [rng.standard_normal((k, 6)) * 2 for k in (1, 4, 7)]
    ys = [rng.standard_normal(p.shape) for p in preds]

    def sl1(d):
        d = abs(d)
        return 0.5 * d * d if d < 1 else d - 0.5

    brute = np.mean([np.mean([sl1(a - b) for a, b in zip(p.ravel(), y.ravel())]) for p, y in zip(preds, ys)])
    assert float(us_jepa_loss(preds, ys).data) == pytest.approx(brute, rel=1e-12)


def test_batch_loss_equals_per_block_loop(tiny_stack, tiny_frames):
    masks = _masks(3)
    pb = pack_batch(tiny_frames, masks)
    cfg = LossConfig()
    packed = float(batch_loss(tiny_stack, pb, cfg).data)
    per_frame = [float(batch_loss(tiny_stack, pack_batch(tiny_frames[i : i + 1], [m]), cfg).data)
                 for i, m in enumerate(masks)]
    assert packed == pytest.approx(np.mean(per_frame), rel=1e-4)


def test_pack_batch_rejects_ragged_target_counts(tiny_frames):
    m = _masks(2)
    bad = MaskSet(m[1].context, m[1].targets[:1], m[1].valid)
    with pytest.raises(ValueError):
        pack_batch(tiny_frames[:2], [m[0], bad])


@pytest.mark.parametrize("kind", ["smooth_l1", "l1"])
def test_full_stack_gradient_check(tiny_frames, kind):
    stack, twin = perturbed_stack_pair(TINY_ENC, TINY_PRED, seed=0)
    masks = _masks(2, seed=1)
    pb = pack_batch(tiny_frames[:2].astype(np.float64), masks)
    pb_ld = pack_batch(tiny_frames[:2].astype(np.longdouble), masks)
    cfg = LossConfig(kind)
    err = fd_check(lambda: batch_loss(stack, pb, cfg), stack.trainable_parameters(), n_coords=20,
                   numeric_fn=lambda: batch_loss(twin, pb_ld, cfg), numeric_params=twin.trainable_parameters())
    assert err < 1e-6


def test_step_leaves_static_teacher_and_moves_student(tiny_stack, tiny_frames):
    h0 = tiny_stack.teacher_hash()
    s0 = tiny_stack.student.weights_hash()
    opt = AdamW(tiny_stack.trainable_parameters(), OptimizerConfig())
    train_step(pack_batch(tiny_frames, _masks(3)), tiny_stack, LossConfig(), opt, 1e-3, 0.04)
    assert tiny_stack.teacher_hash() == h0
    assert tiny_stack.student.weights_hash() != s0
    gn = np.sqrt(sum(float((p.grad ** 2).sum()) for p in tiny_stack.student.parameters()))
    assert gn > 0


def test_ema_mode_moves_teacher_towards_student(tiny_frames):
    stack = ModelStack(TINY_ENC, TINY_PRED, TeacherMode("ema", momentum=(0.5, 0.5)), seed=0)
    h0 = stack.teacher_hash()
    opt = AdamW(stack.trainable_parameters(), OptimizerConfig())
    train_step(pack_batch(tiny_frames, _masks(3)), stack, LossConfig(), opt, 1e-3, 0.0)
    assert stack.teacher_hash() != h0
    assert stack.teacher_hash() != stack.student.weights_hash()


def test_overfit_small_set():
    frames = _frames(64)
    stack = ModelStack(TINY_ENC, TINY_PRED, TeacherMode("static"), seed=0)
    opt = AdamW(stack.trainable_parameters(), OptimizerConfig(base_lr=1e-3, start_lr=1e-3, final_lr=1e-3,
                                                              warmup_epochs=0))
    masks = _masks(64, seed=2)
    sy = encode_target(stack, frames)
    pb = pack_batch(frames, masks)
    first = float(batch_loss(stack, pb, LossConfig(), sy).data)
    for step in range(200):
        rows = np.arange(step % 4 * 16, step % 4 * 16 + 16)
        train_step(pack_batch(frames[rows], [masks[i] for i in rows]), stack, LossConfig(), opt, 1e-3, 0.0, s_y=sy[rows])
    last = float(batch_loss(stack, pb, LossConfig(), sy).data)
    assert last < first


def test_non_finite_loss_raises(tiny_stack, tiny_frames):
    frames = tiny_frames.copy()
    frames[0, 0, 0] = np.nan
    opt = AdamW(tiny_stack.trainable_parameters(), OptimizerConfig())
    with pytest.raises(FloatingPointError, match="non-finite"):
        train_step(pack_batch(frames, _masks(3)), tiny_stack, LossConfig(), opt, 1e-3, 0.0)


def test_validation_is_deterministic(tiny_stack):
    frames = _frames(6)
    regions = np.ones((6, 32, 32), dtype=bool)
    vm = fixed_val_masks(SAMPLER, regions, seed=5)
    vm2 = fixed_val_masks(SAMPLER, regions, seed=5)
    for (i, a), (j, b) in zip(vm, vm2):
        assert i == j and np.array_equal(a.context, b.context)
    v1 = validate(tiny_stack, frames, vm, LossConfig(), batch_size=4)
    v2 = validate(tiny_stack, frames, vm, LossConfig(), batch_size=6)
    assert v1 == pytest.approx(v2, rel=1e-5)
    with pytest.raises(ValueError):
        validate(tiny_stack, frames, [], LossConfig())


def test_best_epoch():
    assert best_epoch([0.5, 0.3, 0.4, 0.3]) == 1
    assert best_epoch([1.0]) == 0
    with pytest.raises(ValueError):
        best_epoch([])


def test_trainer_writes_logs_and_checkpoints(tmp_path):
    frames = _frames(24)
    regions = np.ones((24, 32, 32), dtype=bool)
    stack = ModelStack(TINY_ENC, TINY_PRED, TeacherMode("static"), seed=0)
    h0 = stack.teacher_hash()
    opt = OptimizerConfig(base_lr=1e-3, start_lr=1e-4, final_lr=1e-5, warmup_epochs=1, total_epochs=2)
    tr = Trainer(stack, SAMPLER, opt, batch_size=8, epochs=2, seed=1, out_dir=tmp_path, config={"a": 1})
    state = tr.fit(frames[:16], regions[:16], lambda rng: rng.permutation(16), frames[16:], regions[16:])
    assert len(state.val_history) == 3
    assert state.best_epoch == best_epoch(state.val_history)
    assert stack.teacher_hash() == h0
    ckpts = sorted((tmp_path / "checkpoints").glob("epoch_*.ckpt"))
    assert [p.name for p in ckpts] == ["epoch_000.ckpt", "epoch_001.ckpt", "epoch_002.ckpt"]
    assert (tmp_path / "checkpoints" / "best.ckpt").exists()
    recs = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert sum(r["kind"] == "step" for r in recs) == 4
    assert all(np.isfinite(r["loss"]) for r in recs if r["kind"] == "step")
