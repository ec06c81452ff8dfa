"""Frames, preprocessing, region masks and the synthetic ultrasound generator.

Frames are 2-D float arrays in [0, 1]; region masks are boolean arrays of the
same shape. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import _accel

log = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
ARTIFACT_MAX_FRACTION = 0.05
REGION_THRESHOLD = 5.0 / 255.0
CLOSE_RADIUS = 5
MIN_RESCALE_PIXELS = 50

INCLUSION_KINDS = ("dark", "bright", "smooth", "ring", "halo")
INCLUSION_RADIUS = (0.15, 0.2)  # fraction of the frame side


class EmptyRegionError(ValueError):
    """No ultrasound content could be found in a frame."""


@dataclass
class FrameRecord:
    dataset_id: str
    path: str = ""
    label: int | None = None
    mask_path: str | None = None
    seed: int | None = None
    split: str | None = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {rgb.shape}")
    return np.clip(rgb @ LUMA_WEIGHTS, 0.0, 1.0)


def colored_artifact_mask(rgb: np.ndarray, tol: float = 0.1) -> np.ndarray:
    """Pixels whose channels disagree by more than ``tol`` (overlaid colour graphics)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return (rgb.max(axis=-1) - rgb.min(axis=-1)) > tol


def inpaint_artifacts(frame: np.ndarray, artifact_mask: np.ndarray, max_fraction: float = ARTIFACT_MAX_FRACTION,
                      tol: float = 1e-4) -> np.ndarray:
    """Fill small artifact areas by iterated neighbour averaging.

    Masks covering ``max_fraction`` of the frame or more are left alone and the
    frame is returned unmodified.
    """
    frame = np.asarray(frame)
    m = np.asarray(artifact_mask, dtype=bool)
    if m.shape != frame.shape:
        raise ValueError("artifact mask shape does not match frame")
    if not m.any():
        return frame.copy()
    frac = m.mean()
    if frac >= max_fraction:
        log.info("artifact area %.3f >= %.3f, frame passed through", frac, max_fraction)
        return frame.copy()
    filled, iters = _accel.jacobi_inpaint(frame, m, tol)
    log.debug("inpainted %d pixels in %d sweeps", int(m.sum()), iters)
    out = frame.copy()
    out[m] = filled[m]
    return out


def percentile_rescale(frame: np.ndarray, region: np.ndarray, lo: float = 2.0, hi: float = 98.0,
                       min_pixels: int = MIN_RESCALE_PIXELS) -> np.ndarray:
    """Map the region's ``lo``/``hi`` percentiles to 0/1, zero outside the region."""
    frame = np.asarray(frame, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    vals = frame[region]
    if vals.size < min_pixels:
        log.info("region has %d pixels (< %d), rescale skipped", vals.size, min_pixels)
        return frame.copy()
    p_lo, p_hi = np.percentile(vals, [lo, hi])
    out = np.zeros_like(frame)
    if p_hi <= p_lo:
        log.info("degenerate intensity range in region (p%g == p%g)", lo, hi)
        return out
    out[region] = np.clip((vals - p_lo) / (p_hi - p_lo), 0.0, 1.0)
    return out


def _disk(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return x * x + y * y <= radius * radius


def extract_region_mask(frame: np.ndarray, threshold: float = REGION_THRESHOLD,
                        close_radius: int = CLOSE_RADIUS) -> np.ndarray:
    """Binary mask of the ultrasound content in a grayscale frame.

    3x3 median filter, fixed threshold, morphological closing with a disk,
    largest connected component, hole filling. Raw above-threshold pixels
    adjacent to the component are added back so corners survive the median.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError("extract_region_mask needs a grayscale frame")
    smooth = ndimage.median_filter(frame, size=3, mode="nearest")
    fg = smooth > threshold
    if not fg.any():
        raise EmptyRegionError("no pixels above the region threshold")
    r = close_radius
    padded = np.pad(fg, r)
    closed = ndimage.binary_closing(padded, structure=_disk(r))[r:-r, r:-r]
    labels, n = ndimage.label(closed)
    if n == 0:
        raise EmptyRegionError("no connected region")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    largest = labels == int(np.argmax(sizes))
    # the median filter erodes convex corners; give back raw foreground touching the component
    raw = frame > threshold
    largest |= raw & ndimage.binary_dilation(largest, structure=np.ones((3, 3), bool))
    return ndimage.binary_fill_holes(largest)


def resize_frame(frame: np.ndarray, size: int) -> np.ndarray:
    if frame.shape == (size, size):
        return frame.copy()
    img = Image.fromarray(np.asarray(frame, dtype=np.float32), mode="F")
    return np.clip(np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float64), 0.0, 1.0)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask.copy()
    img = Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255)
    return np.asarray(img.resize((size, size), Image.NEAREST)) > 0


def preprocess(image: np.ndarray, size: int, region: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Full frame pipeline: grayscale, inpaint, region mask, rescale, resize."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        artifacts = colored_artifact_mask(image)
        gray = to_grayscale(image)
        gray = inpaint_artifacts(gray, artifacts)
    else:
        gray = image
    if region is None:
        region = extract_region_mask(gray)
    out = percentile_rescale(gray, region)
    return resize_frame(out, size), resize_mask(region, size)


# ---------------------------------------------------------------------------
# raster I/O
# ---------------------------------------------------------------------------


def read_raster(path) -> np.ndarray:
    """8-bit grayscale or RGB raster -> float array in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def write_raster(path, frame: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(frame)
    img = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def mask_path_for(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".mask.png")


# ---------------------------------------------------------------------------
# synthetic frames
# ---------------------------------------------------------------------------


def _fan(size: int, rng: np.random.Generator) -> np.ndarray:
    h = w = size
    cx = w / 2 + rng.uniform(-0.05, 0.05) * w
    cy = -rng.uniform(0.05, 0.2) * h
    half = np.deg2rad(rng.uniform(28, 38))
    r_in = rng.uniform(0.15, 0.25) * h - cy
    r_out = rng.uniform(0.92, 1.0) * h - cy
    y, x = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = y - cy, x - cx
    rad = np.hypot(dx, dy)
    ang = np.arctan2(dx, dy)
    return (np.abs(ang) <= half) & (rad >= r_in) & (rad <= r_out)


def _smooth_field(size: int, rng: np.random.Generator, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="reflect")
    return f / (f.std() + 1e-12)


def _synth_layout(seed: int, size: int):
    rng = np.random.default_rng(seed)
    region = _fan(size, rng)

    # tissue echogenicity: smooth background, depth bands, per-frame gain
    echo = 0.35 + 0.08 * _smooth_field(size, rng, size / 8)
    depth = np.linspace(0, 1, size)[:, None]
    echo = echo + 0.08 * np.sin(2 * np.pi * (rng.uniform(2, 4) * depth + rng.uniform()))
    echo *= rng.uniform(0.7, 1.3) * (1.0 - rng.uniform(0.1, 0.4) * depth)

    # inclusion disk, fully inside the fan
    radius = rng.uniform(*INCLUSION_RADIUS) * size
    inside = ndimage.distance_transform_edt(region) > radius + 1
    ys, xs = np.nonzero(inside)
    if len(ys) == 0:
        ys, xs = np.nonzero(region)
    k = rng.integers(len(ys))
    cy, cx = ys[k] + 0.5, xs[k] + 0.5
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dist = np.hypot(yy - cy, xx - cx)

    # fully developed speckle: Rayleigh amplitude, mean one
    c = rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))
    c = ndimage.uniform_filter(c.real, 2) + 1j * ndimage.uniform_filter(c.imag, 2)
    spk = np.abs(c)
    spk /= spk.mean()
    return region, echo, dist, radius, spk


def synth_region(seed: int, size: int = 64) -> np.ndarray:
    """Ground-truth fan mask that ``synth_frame`` would use for ``seed``."""
    return _fan(size, np.random.default_rng(seed))


def inclusion_footprint(seed: int, size: int = 64) -> np.ndarray:
    """The disk inside which frames of different classes may differ for ``seed``."""
    _, _, dist, radius, _ = _synth_layout(seed, size)
    return dist <= radius


def synth_frame(class_id: int, seed: int, size: int = 64, n_classes: int = 3):
    """Synthetic fan-shaped ultrasound frame with a class-specific inclusion.

    Returns ``(frame, region, label)``. Everything except the inclusion
    pattern is drawn from ``seed`` alone, so two classes with one seed differ
    only inside the inclusion disk.
    """
    if n_classes > len(INCLUSION_KINDS) or not 0 <= class_id < n_classes:
        raise ValueError(f"class_id {class_id} out of range for {n_classes} classes")
    region, echo, dist, radius, spk = _synth_layout(seed, size)
    footprint = dist <= radius
    kind = INCLUSION_KINDS[class_id]
    gain = np.ones_like(echo)
    if kind == "dark":
        gain[footprint] = 0.2
    elif kind == "bright":
        gain[footprint] = 2.0
    elif kind == "smooth":
        # same mean echo, much weaker speckle
        fine = ndimage.gaussian_filter(spk, 1.5)
        spk = np.where(footprint, fine / fine.mean(), spk)
    elif kind == "ring":
        gain[footprint & (dist >= 0.6 * radius)] = 1.9
    else:
        gain[footprint] = 0.4
        gain[dist <= 0.45 * radius] = 1.8
    frame = np.where(region, np.clip(echo * gain * spk, 0.0, 1.0), 0.0)
    return frame, region, class_id
