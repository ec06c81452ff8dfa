"""Masked-latent losses, the training step, validation and checkpoint selection."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masking import MaskRejected, MaskSampler, MaskSet
from .model import ModelStack, adapt, ema_update, encode_context, encode_target, predict, select
from .numerics import tensor as T
from .numerics.checkpoint import save_checkpoint
from .numerics.optim import AdamW, OptimizerConfig, ema_momentum_at
from .numerics.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    kind: str = "smooth_l1"  # or "l1"
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("smooth_l1", "l1"):
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1, averaged over all elements."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    return T.smooth_l1(pred, target, beta)


def us_jepa_loss(predictions, targets, cfg: LossConfig | None = None) -> Tensor:
    """Mean over target blocks of the per-block (smooth-)L1 distance."""
    cfg = cfg or LossConfig()
    if len(predictions) == 0 or len(predictions) != len(targets):
        raise ValueError("need a non-empty, equal number of predictions and targets")
    total = None
    for p, y in zip(predictions, targets):
        p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
        li = T.smooth_l1(p, y, cfg.beta) if cfg.kind == "smooth_l1" else T.l1(p, y)
        total = li if total is None else total + li
    return total * (1.0 / len(predictions))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _pad(rows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    k = max(len(r) for r in rows)
    idx = np.zeros((len(rows), k), dtype=np.int64)
    valid = np.zeros((len(rows), k), dtype=bool)
    for i, r in enumerate(rows):
        idx[i, : len(r)] = r
        valid[i, : len(r)] = True
    return idx, valid


@dataclass
class PackedBatch:
    frames: np.ndarray  # (B, H, W)
    ctx_idx: np.ndarray  # (B, Kc)
    ctx_valid: np.ndarray
    tgt_idx: np.ndarray  # (T*B, Kt), row t*B + b
    tgt_valid: np.ndarray
    n_targets: int

    @property
    def size(self) -> int:
        return self.frames.shape[0]


def pack_batch(frames: np.ndarray, masks: list[MaskSet]) -> PackedBatch:
    n_t = len(masks[0].targets)
    if any(len(m.targets) != n_t for m in masks):
        raise ValueError("every MaskSet in a batch needs the same number of targets")
    ctx_idx, ctx_valid = _pad([m.context for m in masks])
    tgt_idx, tgt_valid = _pad([m.targets[t] for t in range(n_t) for m in masks])
    return PackedBatch(np.asarray(frames), ctx_idx, ctx_valid, tgt_idx, tgt_valid, n_t)


def batch_loss(stack: ModelStack, batch: PackedBatch, cfg: LossConfig, s_y: np.ndarray | None = None) -> Tensor:
    """Forward pass and loss for a packed batch (mean over frames of the per-frame loss).

    ``s_y`` may carry precomputed teacher embeddings for the batch frames.
    """
    b, n_t = batch.size, batch.n_targets
    if s_y is None:
        s_y = encode_target(stack, batch.frames)
    y = select(np.concatenate([s_y] * n_t, axis=0), batch.tgt_idx)
    c = encode_context(stack, batch.frames, batch.ctx_idx, batch.ctx_valid)
    c_rep = T.concat([c] * n_t, axis=0) if n_t > 1 else c
    ctx_idx = np.concatenate([batch.ctx_idx] * n_t, axis=0)
    ctx_valid = np.concatenate([batch.ctx_valid] * n_t, axis=0)
    z = predict(stack, c_rep, ctx_idx, ctx_valid, batch.tgt_idx, batch.tgt_valid)
    pred = adapt(stack, z)
    # per-element weight: 1 / (B * T * |M_i| * D) on real entries, 0 on padding
    counts = batch.tgt_valid.sum(axis=1, keepdims=True)
    w = batch.tgt_valid / (counts * b * n_t * pred.shape[-1])
    w = w[..., None].astype(pred.dtype)
    y = y.astype(pred.dtype)
    if cfg.kind == "smooth_l1":
        return T.smooth_l1(pred, y, cfg.beta, weights=w)
    return T.l1(pred, y, weights=w)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_val: float = float("inf")
    best_epoch: int = -1
    seed: int = 0
    fallbacks: int = 0
    val_history: list[float] = field(default_factory=list)


def grad_norm(params) -> float:
    return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))


def train_step(batch: PackedBatch, stack: ModelStack, loss_cfg: LossConfig, optimizer: AdamW, lr: float, wd: float,
               progress: float = 0.0, s_y: np.ndarray | None = None) -> float:
    """One optimisation step; returns the loss before the update."""
    optimizer.zero_grad()
    loss = batch_loss(stack, batch, loss_cfg, s_y)
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} (lr={lr:g}, batch={batch.size})")
    T.backward(loss)
    optimizer.step(lr, wd)
    if stack.teacher_mode.kind == "ema":
        ema_update(stack.teacher, stack.student, ema_momentum_at(progress, *stack.teacher_mode.momentum))
    return value


def sample_masks(sampler: MaskSampler, regions, seeds) -> tuple[list[int], list[MaskSet]]:
    """Masks for each region; frames whose masks are rejected are dropped."""
    keep, out = [], []
    for i, (region, s) in enumerate(zip(regions, seeds)):
        try:
            out.append(sampler.sample(region, np.random.default_rng(s)))
            keep.append(i)
        except MaskRejected:
            log.info("frame dropped: mask sampling rejected")
    return keep, out


def fixed_val_masks(sampler: MaskSampler, regions: np.ndarray, seed: int) -> list[tuple[int, MaskSet]]:
    keep, masks = sample_masks(sampler, regions, [[seed, 999_999, i] for i in range(len(regions))])
    return list(zip(keep, masks))


def teacher_embeddings(stack: ModelStack, frames: np.ndarray, batch_size: int = 128) -> np.ndarray:
    return np.concatenate([encode_target(stack, frames[i : i + batch_size])
                           for i in range(0, len(frames), batch_size)])


def validate(stack: ModelStack, frames: np.ndarray, val_masks: list[tuple[int, MaskSet]], loss_cfg: LossConfig,
             batch_size: int = 64, s_y: np.ndarray | None = None) -> float:
    """Mean loss over validation frames under masks frozen at split time."""
    if not val_masks:
        raise ValueError("empty validation set")
    total, n = 0.0, 0
    with T.no_grad():
        for i in range(0, len(val_masks), batch_size):
            chunk = val_masks[i : i + batch_size]
            idx = [k for k, _ in chunk]
            pb = pack_batch(frames[idx], [m for _, m in chunk])
            sy = None if s_y is None else s_y[idx]
            total += float(batch_loss(stack, pb, loss_cfg, sy).data) * pb.size
            n += pb.size
    return total / n


def best_epoch(val_losses: list[float]) -> int:
    """Index of the minimum validation loss (first one on ties)."""
    if not val_losses:
        raise ValueError("no validation losses")
    return int(np.argmin(val_losses))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class Trainer:
    stack: ModelStack
    mask_sampler: MaskSampler
    opt_cfg: OptimizerConfig
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    out_dir: Path | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.optimizer = AdamW(self.stack.trainable_parameters(), self.opt_cfg)
        self.state = TrainState(seed=self.seed)
        self.loss_log: list[dict] = []
        self._log_fh = None

    # -- bookkeeping ---------------------------------------------------------
    def _emit(self, rec: dict) -> None:
        self.loss_log.append(rec)
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._log_fh.flush()

    def _checkpoint(self, epoch: int, val: float) -> Path | None:
        if self.out_dir is None:
            return None
        arrays = {}
        for name, mod in (("student", self.stack.student), ("predictor", self.stack.predictor),
                          ("adapter", self.stack.adapter), ("teacher", self.stack.teacher)):
            for k, v in mod.state_dict().items():
                arrays[f"{name}.{k}"] = v
        meta = {"config_hash": config_hash(self.config), "epoch": epoch, "val_loss": val, "step": self.state.step,
                "seed": self.seed, "teacher_sha256": self.stack.teacher_hash()}
        path = save_checkpoint(self.out_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt", arrays, meta)
        return path

    def _mark_best(self, path: Path) -> None:
        link = path.parent / "best.ckpt"
        if link.is_symlink() or link.exists():
            link.unlink()
        try:
            os.symlink(path.name, link)
        except OSError:
            shutil.copyfile(path, link)

    # -- loop ------------------------------------------------------------------
    def fit(self, frames: np.ndarray, regions: np.ndarray, train_sampler, val_frames: np.ndarray,
            val_regions: np.ndarray) -> TrainState:
        """Train for ``self.epochs`` epochs.

        ``train_sampler`` yields an array of frame indices per epoch when called
        with a generator. Validation is run before training (epoch 0) and after
        every epoch.
        """
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.out_dir / "metrics.jsonl", "w")
        try:
            val_masks = fixed_val_masks(self.mask_sampler, val_regions, self.seed)
            # a frozen teacher sees unaugmented frames, so its outputs can be cached
            static = self.stack.teacher_mode.kind == "static"
            sy_train = teacher_embeddings(self.stack, frames) if static else None
            sy_val = teacher_embeddings(self.stack, val_frames) if static else None
            v0 = validate(self.stack, val_frames, val_masks, self.loss_cfg, s_y=sy_val)
            self._after_epoch(0, v0)
            steps_per_epoch = None
            for epoch in range(1, self.epochs + 1):
                order = np.asarray(train_sampler(np.random.default_rng([self.seed, epoch])))
                n_batches = max(len(order) // self.batch_size, 1)
                steps_per_epoch = steps_per_epoch or n_batches
                for bi in range(n_batches):
                    sel = order[bi * self.batch_size : (bi + 1) * self.batch_size]
                    seeds = [[self.seed, epoch, bi, j] for j in range(len(sel))]
                    keep, masks = sample_masks(self.mask_sampler, regions[sel], seeds)
                    if not keep:
                        continue
                    fb = sum(1 for m in masks if m.fallbacks)
                    self.state.fallbacks += fb
                    progress = ((epoch - 1) + bi / n_batches) / self.epochs
                    lr = self.opt_cfg.lr_at(progress)
                    wd = self.opt_cfg.wd_at(progress)
                    rows = sel[keep]
                    pb = pack_batch(frames[rows], masks)
                    sy = None if sy_train is None else sy_train[rows]
                    loss = train_step(pb, self.stack, self.loss_cfg, self.optimizer, lr, wd, progress, sy)
                    self.state.step += 1
                    self._emit({"kind": "step", "step": self.state.step, "epoch": epoch, "loss": loss, "lr": lr,
                                "wd": wd, "fallbacks": self.state.fallbacks})
                v = validate(self.stack, val_frames, val_masks, self.loss_cfg, s_y=sy_val)
                self._after_epoch(epoch, v)
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        return self.state

    def _after_epoch(self, epoch: int, val: float) -> None:
        self.state.epoch = epoch
        self.state.val_history.append(val)
        self._emit({"kind": "val", "epoch": epoch, "val_loss": val, "fallbacks": self.state.fallbacks})
        log.info("epoch %d val_loss %.6f", epoch, val)
        path = self._checkpoint(epoch, val)
        if val < self.state.best_val:
            self.state.best_val = val
            self.state.best_epoch = epoch
            if path is not None:
                self._mark_best(path)
