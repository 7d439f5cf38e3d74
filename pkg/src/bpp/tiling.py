"""Large-image inference: overlapping tiles blended with a Hamming window.

Per-tile statistics (instance norm) make whole-image and tiled outputs
differ by design; the window-weighted average removes blocking seams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TilePlan", "hamming2d", "plan_tiles", "stitch"]


def _hamming1d(n):
    i = np.arange(n, dtype=np.float64)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * i / (n - 1))


def hamming2d(n, m):
    """Outer product of 1-D Hamming windows, shape (1, 1, n, m).

    Endpoints are 0.54 - 0.46 = 0.08, so every entry is >= 0.08^2 > 0 and
    the accumulated blend weight can never vanish.
    """
    if n < 2 or m < 2:
        raise ValueError(f"hamming2d: window must be at least 2x2, got {n}x{m}")
    return np.outer(_hamming1d(n), _hamming1d(m)).reshape(1, 1, n, m)


@dataclass
class TilePlan:
    """Tile origins over a padded canvas that cover every pixel."""

    h: int
    w: int
    patch: int
    stride: int
    padded_h: int
    padded_w: int
    origins: list  # (row, col) into the padded image


def plan_tiles(h, w, patch, stride):
    """Grid of patch-sized tiles at the given stride.

    The image is padded (bottom/right) so the last row/column of tiles sits
    flush with the padded edge; every padded pixel is covered by >= 1 tile.
    """
    if stride < 1:
        raise ValueError(f"plan_tiles: stride must be >= 1, got {stride}")
    if stride > patch:
        raise ValueError(
            f"plan_tiles: stride {stride} > patch {patch} would leave coverage holes")
    if h < 1 or w < 1:
        raise ValueError(f"plan_tiles: image dims must be positive, got {h}x{w}")

    def steps(dim):
        return max(0, -(-(dim - patch) // stride))  # ceil for dim > patch

    sh, sw = steps(h), steps(w)
    padded_h = patch + sh * stride
    padded_w = patch + sw * stride
    origins = [(r * stride, c * stride) for r in range(sh + 1) for c in range(sw + 1)]
    return TilePlan(h=h, w=w, patch=patch, stride=stride,
                    padded_h=padded_h, padded_w=padded_w, origins=origins)


def _reflect_pad(img, ph, pw):
    if ph == 0 and pw == 0:
        return img
    n, c, h, w = img.shape
    mode = "reflect" if (ph < h and pw < w) else "symmetric"
    if ph >= 2 * h or pw >= 2 * w:
        raise ValueError(
            f"plan needs padding {ph}x{pw}, too large for a {h}x{w} image")
    return np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)


def stitch(forward_fn, image, plan, batch=1):
    """Blend forward_fn over the plan's tiles: sum(window * f) / sum(window).

    forward_fn maps a (B, c, patch, patch) array to the same shape.  Tiles
    are processed in fixed origin order (optionally in batches); the weight
    accumulator runs in float64 so heavy overlap cannot drift.
    """
    image = np.asarray(image)
    n, c, h, w = image.shape
    if (h, w) != (plan.h, plan.w):
        raise ValueError(f"stitch: image {h}x{w} does not match plan {plan.h}x{plan.w}")
    if batch < 1:
        raise ValueError(f"stitch: batch must be >= 1, got {batch}")
    p = plan.patch
    padded = _reflect_pad(image, plan.padded_h - h, plan.padded_w - w)
    window = hamming2d(p, p)
    num = np.zeros((n, c, plan.padded_h, plan.padded_w), dtype=np.float64)
    den = np.zeros((plan.padded_h, plan.padded_w), dtype=np.float64)

    for start in range(0, len(plan.origins), batch):
        chunk = plan.origins[start:start + batch]
        tiles = np.concatenate(
            [padded[:, :, r:r + p, cc:cc + p] for r, cc in chunk], axis=0)
        outs = np.asarray(forward_fn(tiles))
        if outs.shape != tiles.shape:
            raise ValueError(
                f"stitch: forward_fn returned {outs.shape}, expected {tiles.shape}")
        for i, (r, cc) in enumerate(chunk):
            num[:, :, r:r + p, cc:cc + p] += window * outs[i * n:(i + 1) * n]
            den[r:r + p, cc:cc + p] += window[0, 0]

    out = num / den
    return out[:, :, :h, :w].astype(image.dtype)
