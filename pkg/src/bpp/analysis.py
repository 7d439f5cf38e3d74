"""Inspection tooling: residual-magnitude heatmaps, affine decomposition of
a probed network (y = Fx + r), and the PSNR/SSIM metric suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .network import FrozenNonlin, LiveNonlin, Recorder, forward

__all__ = [
    "FrozenNet",
    "ResidualHeatmap",
    "SSIM_C1",
    "SSIM_C2",
    "capture",
    "decompose",
    "frozen_forward",
    "gaussian_window",
    "psnr",
    "residual_heatmap",
    "ssim",
]

SSIM_C1 = 6.5025
SSIM_C2 = 58.5225
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class ResidualHeatmap:
    """L x D grid of mean residual-update magnitudes, max normalized to 100.

    Row k-1 holds level k (level 1 = lowest resolution, always zero: nothing
    arrives there from below).  Exactly one entry equals 100; would-be ties
    after the first are nudged one ulp down.
    """

    values: np.ndarray

    def to_csv(self, path=None):
        lines = [",".join(f"{v:.6f}" for v in row) for row in self.values]
        text = "\n".join(lines) + "\n"
        if path is not None:
            from .ppm import atomic_write_bytes
            atomic_write_bytes(path, text.encode())
        return text

    def to_pgm(self, path):
        from .ppm import pgm_write
        img = (self.values / 100.0).reshape(1, 1, *self.values.shape)
        pgm_write(path, img)


def residual_heatmap(params, images):
    """Average the L2 magnitude of each flux unit's incoming residual over a
    dataset, then normalize the grid so its maximum is exactly 100.
    """
    cfg = params.config
    total = np.zeros((cfg.levels, cfg.depth), dtype=np.float64)
    count = 0
    for img in images:
        x = img if isinstance(img, T.Tensor) else T.tensor(img)
        rec = Recorder(record_e=True)
        forward(x, params, recorder=rec)
        for (k, t), e in rec.e_in.items():
            total[k - 1, t - 1] += math.sqrt(float(np.sum(e.astype(np.float64) ** 2)))
        count += 1
    if count == 0:
        raise ValueError("residual_heatmap: empty dataset")
    total /= count
    peak = total.max()
    if peak <= 0.0:
        raise ValueError(
            "residual_heatmap: all residual updates are zero, nothing to normalize")
    values = total * (100.0 / peak)
    flat = values.reshape(-1)
    first = int(np.argmax(flat))
    for i in range(flat.size):
        if flat[i] >= 100.0:
            flat[i] = 100.0 if i == first else np.nextafter(100.0, 0.0)
    return ResidualHeatmap(values=values)


@dataclass
class FrozenNet:
    """A probed network with every nonlinearity pinned.

    Replaying any same-shape input through the captured ReLU masks and
    instance-norm statistics is an affine map y = Fx + r that agrees with
    the live network on the probe itself.
    """

    params: object
    records: list
    probe_shape: tuple

    def mask_fractions(self):
        """Share of active ReLU entries per (step, level, role) tag."""
        out = {}
        for rec in self.records:
            if rec[0] == "relu":
                out[rec[1]] = float(np.mean(rec[2]))
        return out


def capture(params, probe):
    """Run the probe once, recording every ReLU mask and norm statistic in
    execution order."""
    x = probe if isinstance(probe, T.Tensor) else T.tensor(probe)
    rec = Recorder(record_nonlin=True)
    forward(x, params, recorder=rec)
    return FrozenNet(params=params, records=rec.nonlin, probe_shape=x.data.shape)


def frozen_forward(frozen, v):
    """Forward pass with all nonlinearities replaced by their captured,
    input-independent actions."""
    x = v if isinstance(v, T.Tensor) else T.tensor(v)
    if x.data.shape != frozen.probe_shape:
        raise ValueError(
            f"frozen_forward: input shape {x.data.shape} != probe shape "
            f"{frozen.probe_shape}")
    out = forward(x, frozen.params, nonlin=FrozenNonlin(frozen.records))
    return out.data


def decompose(params, x):
    """Split the network's action on x into Fx (input-dependent filtering)
    and r (the fixed image contributed by the nonlinearities)."""
    x = x if isinstance(x, T.Tensor) else T.tensor(x)
    frozen = capture(params, x)
    r = frozen_forward(frozen, np.zeros(frozen.probe_shape, dtype=x.data.dtype))
    fx = frozen_forward(frozen, x) - r
    return fx, r


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalized 2-D Gaussian window."""
    i = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(i * i) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _to_nchw(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 4:
        raise ValueError(f"metrics expect (n,c,h,w) arrays, got shape {a.shape}")
    return a


def _luma(a, mode):
    """Channels to compare on a 255 scale; inputs are RGB in [0, 1]."""
    if mode == "rgb":
        return a * 255.0
    if a.shape[1] != 3:
        raise ValueError(f"mode {mode!r} needs 3 channels, got {a.shape[1]}")
    r, g, b = a[:, 0:1], a[:, 1:2], a[:, 2:3]
    if mode == "y_m":
        # offset luma, range [16, 235]
        return 16.0 + 65.481 * r + 128.553 * g + 24.966 * b
    if mode == "y_p":
        return (0.299 * r + 0.587 * g + 0.114 * b) * 255.0
    raise ValueError(f"unknown metric mode {mode!r} (use rgb, y_m or y_p)")


def psnr(a, b, mode="rgb"):
    """10*log10(255^2 / MSE); +inf for identical images."""
    a, b = _to_nchw(a), _to_nchw(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ, {a.shape} vs {b.shape}")
    d = _luma(a, mode) - _luma(b, mode)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _ssim_plane(x, y, window):
    mu_x = _valid_corr(x, window)
    mu_y = _valid_corr(y, window)
    sxx = _valid_corr(x * x, window) - mu_x * mu_x
    syy = _valid_corr(y * y, window) - mu_y * mu_y
    sxy = _valid_corr(x * y, window) - mu_x * mu_y
    # parenthesized so swapping x and y is bitwise symmetric
    num = (2.0 * (mu_x * mu_y) + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = ((mu_x * mu_x) + (mu_y * mu_y) + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def _valid_corr(plane, kern):
    from numpy.lib.stride_tricks import sliding_window_view
    win = sliding_window_view(plane, kern.shape)
    return np.einsum("hwuv,uv->hw", win, kern, optimize=True)


def ssim(a, b, mode="rgb"):
    """Mean local SSIM over 11x11 Gaussian windows (sigma 1.5), channel mean."""
    a, b = _to_nchw(a), _to_nchw(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    la, lb = _luma(a, mode), _luma(b, mode)
    n, c, h, w = la.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(
            f"ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    window = gaussian_window()
    vals = [np.mean(_ssim_plane(la[i, j], lb[i, j], window))
            for i in range(n) for j in range(c)]
    return float(np.mean(vals))
