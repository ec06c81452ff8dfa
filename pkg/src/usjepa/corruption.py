"""Blur, contrast depletion and speckle corruptions at integer severities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel

SEVERITIES = (1, 2, 3)
KINDS = ("blur", "contrast", "speckle")
CONTRAST_ALPHA = {1: 0.7, 2: 0.5, 3: 0.3}
SPECKLE_SIGMA_PER_LEVEL = 0.35
SPECKLE_BOX_SIDE = {1: 3, 2: 5, 3: 7}


def _check_severity(eps: int) -> int:
    if isinstance(eps, bool) or int(eps) != eps or int(eps) not in SEVERITIES:
        raise ValueError(f"severity must be one of {SEVERITIES}, got {eps!r}")
    return int(eps)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}")
        _check_severity(self.severity)

    def apply(self, frame: np.ndarray, region: np.ndarray | None = None) -> np.ndarray:
        if self.kind == "blur":
            return gaussian_blur(frame, self.severity)
        if self.kind == "contrast":
            if region is None:
                region = np.ones(np.shape(frame), dtype=bool)
            return contrast_deplete(frame, region, self.severity)
        return speckle(frame, self.severity, self.seed)


def blur_kernel_side(eps: int) -> int:
    return 2 * int(np.floor(2 * eps)) + 1


def gaussian_kernel_1d(sigma: float, side: int) -> np.ndarray:
    """Sampled, unit-sum Gaussian of odd length ``side``."""
    if side % 2 == 0 or side < 1:
        raise ValueError("kernel side must be a positive odd integer")
    r = side // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(frame: np.ndarray, eps: int) -> np.ndarray:
    eps = _check_severity(eps)
    k = gaussian_kernel_1d(float(eps), blur_kernel_side(eps))
    out = _accel.separable_conv(np.asarray(frame, dtype=np.float64), k)
    return np.clip(out, 0.0, 1.0)


def region_median(frame: np.ndarray, region: np.ndarray) -> float:
    """Lower median of the region intensities (always one of the pixel values)."""
    vals = np.asarray(frame, dtype=np.float64)[np.asarray(region, dtype=bool)]
    if vals.size == 0:
        raise ValueError("empty region")
    k = (vals.size - 1) // 2
    return float(np.partition(vals, k)[k])


def contrast_deplete(frame: np.ndarray, region: np.ndarray, eps: int) -> np.ndarray:
    """Pull region intensities toward the region median by ``CONTRAST_ALPHA[eps]``.

    The lower median is used so the median pixel is a fixed point and the
    map, being monotone, leaves the region median unchanged bit for bit.
    """
    eps = _check_severity(eps)
    frame = np.asarray(frame, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("contrast depletion needs a non-empty region")
    med = region_median(frame, region)
    alpha = CONTRAST_ALPHA[eps]
    out = frame.copy()
    out[region] = med + alpha * (frame[region] - med)
    return np.clip(out, 0.0, 1.0)


def speckle_noise(shape, eps: int, seed) -> np.ndarray:
    """Spatially correlated zero-mean noise: Gaussian draws smoothed by a box filter."""
    eps = _check_severity(eps)
    rng = np.random.default_rng(seed)
    eta = rng.normal(0.0, SPECKLE_SIGMA_PER_LEVEL * eps, size=shape)
    side = SPECKLE_BOX_SIDE[eps]
    return _accel.separable_conv(eta, np.full(side, 1.0 / side))


def speckle(frame: np.ndarray, eps: int, seed) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    return np.clip(frame * (1.0 + speckle_noise(frame.shape, eps, seed)), 0.0, 1.0)


def corrupt(frames: np.ndarray, regions: np.ndarray | None, kind: str, eps: int, seed: int = 0) -> np.ndarray:
    """Apply one corruption to a stack of frames; ``eps = 0`` returns an exact copy.

    Speckle seeds are derived per frame from ``seed`` and the frame index.
    """
    frames = np.asarray(frames)
    if eps == 0:
        return frames.copy()
    CorruptionSpec(kind, eps, seed)
    out = np.empty_like(frames)
    for i, f in enumerate(frames):
        if kind == "speckle":
            out[i] = speckle(f, eps, [seed, i])
        else:
            region = None if regions is None else regions[i]
            out[i] = CorruptionSpec(kind, eps).apply(f, region)
    return out


def gallery(frame: np.ndarray, region: np.ndarray | None = None, seed: int = 0, gap: int = 2) -> np.ndarray:
    """Grid image: one row per corruption kind, columns at severity 0..3."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape
    rows = len(KINDS)
    cols = len(SEVERITIES) + 1
    canvas = np.ones((rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap))
    for r, kind in enumerate(KINDS):
        for c in range(cols):
            tile = frame if c == 0 else corrupt(frame[None], None if region is None else region[None], kind, c, seed)[0]
            canvas[r * (h + gap) : r * (h + gap) + h, c * (w + gap) : c * (w + gap) + w] = tile
    return canvas
