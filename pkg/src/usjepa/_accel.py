"""Hot image kernels with a numba path and a pure-numpy fallback.

Set ``USJEPA_NUMBA=0`` in the environment before import to force the numpy
path. Both paths are kept numerically interchangeable; the benchmark script in
``benchmarks/`` compares them.
"""

import os

import numpy as np

_WANT_NUMBA = os.environ.get("USJEPA_NUMBA", "1").strip().lower() not in ("0", "false", "off", "no")

try:
    if not _WANT_NUMBA:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def dec(f):
            return f

        return dec if not args or not callable(args[0]) else dec(args[0])


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------


def _reflect_pad_np(img, r):
    return np.pad(img, r, mode="symmetric")


def _conv_rows_np(img, k):
    r = len(k) // 2
    p = np.pad(img, ((0, 0), (r, r)), mode="symmetric")
    out = np.zeros_like(img)
    w = img.shape[1]
    for t in range(len(k)):
        out += k[t] * p[:, t : t + w]
    return out


def separable_conv_np(img, k):
    tmp = _conv_rows_np(img, k)
    return _conv_rows_np(tmp.T, k).T


def jacobi_inpaint_np(img, mask, tol, max_iter):
    out = img.copy()
    m = mask.astype(bool)
    if not m.any():
        return out, 0
    out[m] = out[~m].mean() if (~m).any() else 0.0
    for it in range(1, max_iter + 1):
        p = np.pad(out, 1, mode="edge")
        avg = 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])
        delta = np.abs(avg[m] - out[m]).max()
        out[m] = avg[m]
        if delta < tol:
            return out, it
    return out, max_iter


def patch_any_np(region, patch):
    h, w = region.shape
    r = region.reshape(h // patch, patch, w // patch, patch)
    return r.any(axis=(1, 3)).reshape(-1)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu_fwd_np(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd_np(g, x, t):
    dinner = _GELU_C * (1.0 + 3 * _GELU_A * (x * x))
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _reflect_index(i, n):
    # half-sample symmetric: d c b a | a b c d | d c b a
    while i < 0 or i >= n:
        if i < 0:
            i = -i - 1
        if i >= n:
            i = 2 * n - i - 1
    return i


@njit(cache=True)
def _separable_conv_nb(img, k):
    h, w = img.shape
    n = k.shape[0]
    r = n // 2
    ix = np.empty(w + 2 * r, dtype=np.int64)
    for i in range(w + 2 * r):
        ix[i] = _reflect_index(i - r, w)
    iy = np.empty(h + 2 * r, dtype=np.int64)
    for i in range(h + 2 * r):
        iy[i] = _reflect_index(i - r, h)
    tmp = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for t in range(n):
                acc += k[t] * img[y, ix[x + t]]
            tmp[y, x] = acc
    out = np.zeros((h, w))
    for y in range(h):
        for t in range(n):
            kt = k[t]
            src = iy[y + t]
            for x in range(w):
                out[y, x] += kt * tmp[src, x]
    return out


@njit(cache=True)
def _jacobi_inpaint_nb(img, mask, tol, max_iter):
    h, w = img.shape
    out = img.copy()
    n_known = 0
    s = 0.0
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                s += img[y, x]
                n_known += 1
    fill = s / n_known if n_known > 0 else 0.0
    n_masked = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                out[y, x] = fill
                n_masked += 1
    if n_masked == 0:
        return out, 0
    nxt = out.copy()
    for it in range(1, max_iter + 1):
        delta = 0.0
        for y in range(h):
            for x in range(w):
                if mask[y, x]:
                    up = out[max(y - 1, 0), x]
                    dn = out[min(y + 1, h - 1), x]
                    lf = out[y, max(x - 1, 0)]
                    rt = out[y, min(x + 1, w - 1)]
                    v = 0.25 * (up + dn + lf + rt)
                    d = abs(v - out[y, x])
                    if d > delta:
                        delta = d
                    nxt[y, x] = v
        for y in range(h):
            for x in range(w):
                if mask[y, x]:
                    out[y, x] = nxt[y, x]
        if delta < tol:
            return out, it
    return out, max_iter


@njit(cache=True)
def _patch_any_nb(region, patch):
    h, w = region.shape
    rows = h // patch
    cols = w // patch
    out = np.zeros(rows * cols, dtype=np.bool_)
    for py in range(rows):
        for px in range(cols):
            hit = False
            for y in range(py * patch, (py + 1) * patch):
                for x in range(px * patch, (px + 1) * patch):
                    if region[y, x]:
                        hit = True
                        break
                if hit:
                    break
            out[py * cols + px] = hit
    return out


@njit(cache=True, fastmath=True)
def _gelu_bwd_nb(g, x, t, out, c, a):
    gf = g.ravel()
    xf = x.ravel()
    tf = t.ravel()
    of = out.ravel()
    for i in range(xf.shape[0]):
        v = xf[i]
        th = tf[i]
        one = c / c
        dinner = c * (one + 3 * a * v * v)
        of[i] = gf[i] * (0.5 * one * (one + th) + 0.5 * one * v * (one - th * th) * dinner)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def separable_conv(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve with ``kernel`` along both axes, symmetric (reflect) border."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if HAVE_NUMBA:
        return _separable_conv_nb(img, kernel)
    return separable_conv_np(img, kernel)


def jacobi_inpaint(img: np.ndarray, mask: np.ndarray, tol: float = 1e-4, max_iter: int = 10_000):
    """Fill ``mask`` pixels by 4-neighbour averaging until the update is below ``tol``.

    Returns ``(filled, iterations)``.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if HAVE_NUMBA:
        return _jacobi_inpaint_nb(img, mask, tol, max_iter)
    return jacobi_inpaint_np(img, mask, tol, max_iter)


def patch_any(region: np.ndarray, patch: int) -> np.ndarray:
    region = np.ascontiguousarray(region, dtype=np.bool_)
    if HAVE_NUMBA:
        return _patch_any_nb(region, patch)
    return patch_any_np(region, patch)


def gelu_forward(x: np.ndarray):
    """Tanh-approximated GELU; returns ``(y, tanh_term)`` for the backward pass.

    Always numpy: its SIMD tanh beats a scalar numba loop on this op.
    """
    return gelu_fwd_np(x)


def gelu_backward(g: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        g = np.ascontiguousarray(g, dtype=x.dtype)
        out = np.empty_like(x)
        dt = x.dtype.type
        _gelu_bwd_nb(g, x, t, out, dt(_GELU_C), dt(_GELU_A))
        return out
    return gelu_bwd_np(g, x, t)
