"""Patch grids and region-conditioned context/target block sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 20


class MaskRejected(RuntimeError):
    """No block with any valid patch was found within the attempt budget."""


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    patch_size: int = 16

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} must divide {self.height}x{self.width}")

    @property
    def rows(self) -> int:
        return self.height // self.patch_size

    @property
    def cols(self) -> int:
        return self.width // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    def coords(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx)
        return idx // self.cols, idx % self.cols


@dataclass(frozen=True)
class BlockConstraints:
    scale_range: tuple[float, float]
    aspect_range: tuple[float, float] = (0.75, 1.5)
    count: int = 1
    tau: int = 10

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"bad scale range {self.scale_range}")
        if self.aspect_range[0] > self.aspect_range[1] or self.aspect_range[0] <= 0:
            raise ValueError(f"bad aspect range {self.aspect_range}")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")


@dataclass
class MaskSet:
    context: np.ndarray
    targets: list[np.ndarray]
    valid: np.ndarray
    fallbacks: int = 0

    def check(self, n_patches: int, tau: int | None = None) -> None:
        """Raise AssertionError if any structural invariant is broken."""
        valid = set(self.valid.tolist())
        ctx = set(self.context.tolist())
        assert all(0 <= i < n_patches for i in ctx)
        assert ctx <= valid, "context leaves the valid region"
        for t in self.targets:
            ts = set(t.tolist())
            assert all(0 <= i < n_patches for i in ts)
            assert ts <= valid, "target leaves the valid region"
            assert not (ctx & ts), "context overlaps a target"
        if tau is not None and self.fallbacks == 0:
            assert len(ctx) >= tau and all(len(t) >= tau for t in self.targets)


def valid_patches(region: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Indices of patches whose footprint contains at least one region pixel."""
    region = np.asarray(region, dtype=bool)
    if region.shape != (grid.height, grid.width):
        raise ValueError(f"region shape {region.shape} does not match grid {grid.height}x{grid.width}")
    idx = np.flatnonzero(_accel.patch_any(region, grid.patch_size))
    if idx.size == 0:
        raise MaskRejected("region intersects no patch")
    return idx


def _feasible_dims(grid: PatchGrid, scale_range, aspect_range) -> np.ndarray:
    n = grid.n_patches
    h, w = np.mgrid[1 : grid.rows + 1, 1 : grid.cols + 1]
    area = h * w / n
    ratio = w / h
    eps = 1e-12
    ok = (
        (area >= scale_range[0] - eps)
        & (area <= scale_range[1] + eps)
        & (ratio >= aspect_range[0] - eps)
        & (ratio <= aspect_range[1] + eps)
    )
    return np.stack([h[ok], w[ok]], axis=1)


def sample_block(grid: PatchGrid, scale_range, aspect_range, rng: np.random.Generator) -> np.ndarray:
    """Uniformly placed rectangle of patches.

    A target area fraction and width/height ratio are drawn uniformly (ratio
    log-uniformly); the rectangle is the integer shape that satisfies both
    ranges exactly and lies closest to the draw in log-area/log-ratio.
    """
    dims = _feasible_dims(grid, scale_range, aspect_range)
    if len(dims) == 0:
        raise ValueError(
            f"no block of scale {scale_range} and aspect {aspect_range} fits a {grid.rows}x{grid.cols} grid"
        )
    s = rng.uniform(*scale_range)
    a = math.exp(rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1])))
    area = s * grid.n_patches
    d_area = np.log(dims[:, 0] * dims[:, 1]) - math.log(area)
    d_ratio = np.log(dims[:, 1] / dims[:, 0]) - math.log(a)
    h, w = dims[int(np.argmin(d_area**2 + d_ratio**2))]
    top = rng.integers(0, grid.rows - h + 1)
    left = rng.integers(0, grid.cols - w + 1)
    rr, cc = np.mgrid[top : top + h, left : left + w]
    return np.sort((rr * grid.cols + cc).ravel())


def _draw(grid, valid, exclude, cons: BlockConstraints, rng, max_attempts):
    best, best_n = None, -1
    for _ in range(max_attempts):
        block = sample_block(grid, cons.scale_range, cons.aspect_range, rng)
        m = np.intersect1d(block, valid, assume_unique=True)
        if exclude is not None and exclude.size:
            m = np.setdiff1d(m, exclude, assume_unique=True)
        if m.size >= cons.tau:
            return m, False
        if m.size > best_n:
            best, best_n = m, m.size
    if best_n < 1:
        raise MaskRejected(f"no block kept a valid patch in {max_attempts} attempts")
    return best, True


def sample_targets(grid: PatchGrid, valid: np.ndarray, cons: BlockConstraints, rng: np.random.Generator,
                   max_attempts: int = MAX_ATTEMPTS) -> tuple[list[np.ndarray], int]:
    """Draw ``cons.count`` target masks ``B_i & valid`` with at least ``tau`` patches.

    Returns the masks and how many used the best-effort fallback.
    """
    targets, fallbacks = [], 0
    for _ in range(cons.count):
        m, fb = _draw(grid, valid, None, cons, rng, max_attempts)
        targets.append(m)
        fallbacks += fb
    return targets, fallbacks


def sample_context(grid: PatchGrid, valid: np.ndarray, targets: list[np.ndarray], cons: BlockConstraints,
                   rng: np.random.Generator, max_attempts: int = MAX_ATTEMPTS) -> tuple[np.ndarray, int]:
    """Context mask ``(B_c & valid) - union(targets)`` with at least ``tau`` patches."""
    exclude = np.unique(np.concatenate(targets)) if targets else None
    m, fb = _draw(grid, valid, exclude, cons, rng, max_attempts)
    return m, int(fb)


@dataclass
class MaskSampler:
    """Draws a full MaskSet per frame and keeps fallback/rejection counters."""

    grid: PatchGrid
    target: BlockConstraints = field(default_factory=lambda: BlockConstraints((0.075, 0.125), count=4))
    context: BlockConstraints = field(default_factory=lambda: BlockConstraints((0.85, 1.0), count=1))
    usrc: bool = True
    max_attempts: int = MAX_ATTEMPTS
    n_sampled: int = 0
    n_fallback: int = 0
    n_rejected: int = 0

    def valid_for(self, region: np.ndarray | None) -> np.ndarray:
        if not self.usrc or region is None:
            return np.arange(self.grid.n_patches)
        return valid_patches(region, self.grid)

    def sample(self, region: np.ndarray | None, rng: np.random.Generator) -> MaskSet:
        valid = self.valid_for(region)
        try:
            targets, fb_t = sample_targets(self.grid, valid, self.target, rng, self.max_attempts)
            ctx, fb_c = sample_context(self.grid, valid, targets, self.context, rng, self.max_attempts)
        except MaskRejected:
            self.n_rejected += 1
            raise
        self.n_sampled += 1
        fb = fb_t + fb_c
        if fb:
            self.n_fallback += 1
            log.debug("mask fallback used (%d blocks)", fb)
        return MaskSet(ctx, targets, valid, fb)

    @property
    def fallback_rate(self) -> float:
        return self.n_fallback / max(self.n_sampled, 1)


def render_overlay(frame: np.ndarray, masks: MaskSet, grid: PatchGrid) -> np.ndarray:
    """RGB uint8 picture: context patches tinted green, targets in other colours."""
    g = np.clip(np.asarray(frame, dtype=np.float64), 0, 1)
    rgb = np.repeat(g[..., None], 3, axis=-1) * 0.6
    palette = np.array([[0.9, 0.2, 0.2], [0.2, 0.4, 0.95], [0.95, 0.8, 0.1], [0.8, 0.3, 0.9], [0.1, 0.9, 0.9]])
    p = grid.patch_size

    def tint(idx, colour, alpha):
        r, c = grid.coords(idx)
        for y, x in zip(r, c):
            sl = (slice(y * p, (y + 1) * p), slice(x * p, (x + 1) * p))
            rgb[sl] = (1 - alpha) * rgb[sl] + alpha * colour

    tint(masks.context, np.array([0.1, 0.85, 0.2]), 0.35)
    for i, t in enumerate(masks.targets):
        tint(t, palette[i % len(palette)], 0.45)
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)
