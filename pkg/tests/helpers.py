"""Independent oracles shared by the test modules."""

import numpy as np

from usjepa.numerics import tensor as T


def fd_check(loss_fn, params, n_coords=20, h=1e-5, seed=0, numeric_fn=None, numeric_params=None):
    """Compare backward() with central differences on random coordinates.

    ``numeric_fn``/``numeric_params`` optionally give a second copy of the
    model (e.g. in extended precision) on which the differences are taken.
    Returns the largest relative error |a - n| / max(|a|, |n|, 1e-12).
    """
    numeric_fn = numeric_fn or loss_fn
    numeric_params = numeric_params or params
    for p in params:
        p.zero_grad()
    T.backward(loss_fn())
    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params])
    worst = 0.0
    for _ in range(n_coords):
        pi = int(rng.choice(len(params), p=sizes / sizes.sum()))
        p = params[pi]
        j = int(rng.integers(p.data.size))
        analytic = float(p.grad.ravel()[j])
        flat = numeric_params[pi].data.reshape(-1)
        step = flat.dtype.type(h)
        orig = flat[j]
        flat[j] = orig + step
        with T.no_grad():
            up = numeric_fn().data
        flat[j] = orig - step
        with T.no_grad():
            dn = numeric_fn().data
        flat[j] = orig
        numeric = float((up - dn) / (2 * step))
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst


def brute_macro_f1(pred, labels, k):
    """Per-class F1 from explicit TP/FP/FN loops."""
    scores = []
    for c in range(k):
        tp = fp = fn = 0
        for p, y in zip(pred, labels):
            if p == c and y == c:
                tp += 1
            elif p == c:
                fp += 1
            elif y == c:
                fn += 1
        scores.append(0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / k


def perturbed_stack_pair(enc_cfg, pred_cfg, seed=0, scale=0.2):
    """A float64 stack at a generic parameter point plus an extended-precision twin.

    At initialisation many attention gradients are ~1e-11, below what a
    difference of two float64 losses can resolve, so every trainable weight
    is jittered by N(0, scale^2) first. The twin carries identical values in
    np.longdouble and is used only for the numeric side of the check.
    """
    from usjepa.model import ModelStack, TeacherMode

    stack = ModelStack(enc_cfg, pred_cfg, TeacherMode("static"), seed=seed).astype(np.float64)
    rng = np.random.default_rng([seed, 1])
    for p in stack.trainable_parameters():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)
    twin = ModelStack(enc_cfg, pred_cfg, TeacherMode("static"), seed=seed)
    for (_, p), (_, q) in zip(stack.named_parameters(), twin.named_parameters()):
        q.data = p.data.copy()
    twin.astype(np.longdouble)
    return stack, twin
