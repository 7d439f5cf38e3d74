"""Bicubic resampling and the classical linear back-projection iteration.

These are plain numpy functions (no differentiation tape): they synthesize
degradation pairs, seed the learned scalers, and provide the linear
upscale/downscale pair used as a convergence oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "KEYS_A",
    "IbpProblem",
    "bicubic_down2_kernel9",
    "bicubic_pair",
    "bicubic_resize",
    "degrade",
    "ibp_run",
    "keys_cubic",
]

KEYS_A = -0.5  # Keys cubic parameter


def keys_cubic(t, a=KEYS_A):
    """Keys cubic kernel value at offset t (support (-2, 2))."""
    at = abs(float(t))
    if at <= 1.0:
        return (a + 2.0) * at ** 3 - (a + 3.0) * at ** 2 + 1.0
    if at < 2.0:
        return a * at ** 3 - 5.0 * a * at ** 2 + 8.0 * a * at - 4.0 * a
    return 0.0


def _keys_vec(t, a=KEYS_A):
    at = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(at)
    near = at <= 1.0
    far = (at > 1.0) & (at < 2.0)
    out[near] = (a + 2.0) * at[near] ** 3 - (a + 3.0) * at[near] ** 2 + 1.0
    out[far] = a * at[far] ** 3 - 5.0 * a * at[far] ** 2 + 8.0 * a * at[far] - 4.0 * a
    return out


def resize_weights(n_in, n_out, a=KEYS_A):
    """Dense (n_out, n_in) matrix of one separable resize axis.

    Pixel-center alignment, clamp-to-edge, kernel stretched by the scale
    ratio when downscaling (antialias), weights normalized per output pixel.
    """
    if n_out < 1:
        raise ValueError(f"resize_weights: output size must be >= 1, got {n_out}")
    scaleratio = n_in / n_out
    stretch = max(scaleratio, 1.0)
    support = 2.0 * stretch
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) * scaleratio - 0.5
        lo = math.ceil(center - support)
        hi = math.floor(center + support)
        taps = np.arange(lo, hi + 1)
        wts = _keys_vec((taps - center) / stretch, a)
        s = wts.sum()
        if s == 0.0:
            raise ValueError(f"resize_weights: empty kernel at output index {i}")
        wts /= s
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), wts)
    return mat


def bicubic_resize(img, out_h, out_w, a=KEYS_A):
    """Separable bicubic resize of an (n, c, h, w) array."""
    img = np.asarray(img)
    n, c, h, w = img.shape
    mh = resize_weights(h, out_h, a)
    mw = resize_weights(w, out_w, a)
    tmp = np.einsum("oh,nchw->ncow", mh, img.astype(np.float64), optimize=True)
    out = np.einsum("pw,ncow->ncop", mw, tmp, optimize=True)
    return out.astype(img.dtype)


def bicubic_down2_kernel9():
    """The 9x9 antialiased bicubic kernel for exact 2x downscaling.

    Separable, symmetric, normalized to sum 1; the natural initializer for a
    trainable stride-2 depthwise 9x9 scaler.
    """
    taps = np.array([keys_cubic((u - 4) / 2.0) for u in range(9)], dtype=np.float64)
    taps /= taps.sum()
    return np.outer(taps, taps).reshape(1, 1, 9, 9)


def degrade(img, f):
    """Bicubic down-then-up by factor f; output dims equal input dims."""
    if f not in (2, 3, 4, 8):
        raise ValueError(f"degrade: factor must be one of 2, 3, 4, 8, got {f}")
    img = np.asarray(img)
    n, c, h, w = img.shape
    if h % f or w % f:
        raise ValueError(f"degrade: dims {h}x{w} not divisible by factor {f}; crop first")
    low = bicubic_resize(img, h // f, w // f)
    return bicubic_resize(low, h, w)


@dataclass
class IbpProblem:
    """Classical back-projection setup: observation x, linear up/down maps.

    P upscales by the factor, R downscales; R(P(x)) must match x's shape.
    """

    x: np.ndarray
    up: Callable[[np.ndarray], np.ndarray]
    down: Callable[[np.ndarray], np.ndarray]
    iters: int


def bicubic_pair(factor):
    """(up, down) bicubic operators for an integer scale factor."""

    def up(img):
        n, c, h, w = img.shape
        return bicubic_resize(img, h * factor, w * factor)

    def down(img):
        n, c, h, w = img.shape
        if h % factor or w % factor:
            raise ValueError(f"bicubic_pair: dims {h}x{w} not divisible by {factor}")
        return bicubic_resize(img, h // factor, w // factor)

    return up, down


def ibp_run(problem):
    """Iterate h <- h + P(x - R h) from h = P x.

    Returns the final estimate and the L2 residual norms ||x - R h|| for
    every iterate including the initial one (iters + 1 entries).
    """
    if problem.iters < 0:
        raise ValueError(f"ibp_run: iters must be >= 0, got {problem.iters}")
    x = np.asarray(problem.x, dtype=np.float64)
    h = problem.up(x)
    back = problem.down(h)
    if back.shape != x.shape:
        raise ValueError(
            f"ibp_run: down(up(x)) shape {back.shape} != observation shape {x.shape}")
    e = x - back
    norms = [float(np.sqrt(np.sum(e * e)))]
    for _ in range(problem.iters):
        h = h + problem.up(e)
        e = x - problem.down(h)
        norms.append(float(np.sqrt(np.sum(e * e))))
    return h, norms
