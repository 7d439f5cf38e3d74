"""Supervised training at desk scale: corpus synthesis, degradation pairs,
patch sampling, losses, Adam, the step-halving schedule, and versioned
checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .analysis import SSIM_C1, SSIM_C2, SSIM_WINDOW, gaussian_window
from .network import BppConfig, build_params, forward
from .ppm import atomic_write_bytes, ppm_read
from .resample import degrade

__all__ = [
    "Adam",
    "Checkpoint",
    "DatasetSpec",
    "SrDataset",
    "TrainConfig",
    "TrainResult",
    "load_checkpoint",
    "lr_schedule",
    "make_checkpoint",
    "make_pairs",
    "neg_ssim_loss",
    "params_from_checkpoint",
    "sample_batch",
    "save_checkpoint",
    "serialize_checkpoint",
    "synth_image",
    "train",
]

VALID_FACTORS = (2, 3, 4, 8)


@dataclass(frozen=True)
class DatasetSpec:
    """Where training pairs come from.

    source "synthetic" draws `count` procedural images of `size` x `size`;
    source "dir" reads every PPM under `path`.  Impaired inputs are the
    ground truth put through bicubic down-then-up at each factor.
    """

    source: str
    factors: tuple = (2,)
    count: int = 0
    size: int = 0
    seed: int = 0
    path: str = ""
    val_fraction: float = 0.125

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(int(f) for f in self.factors))
        if self.source not in ("synthetic", "dir"):
            raise ValueError(f"source must be 'synthetic' or 'dir', got {self.source!r}")
        if not self.factors or any(f not in VALID_FACTORS for f in self.factors):
            raise ValueError(
                f"factors must be a non-empty subset of {VALID_FACTORS}, got {self.factors}")
        if self.source == "synthetic" and self.count < 2:
            raise ValueError(f"need count >= 2 for a validation split, got {self.count}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0,1), got {self.val_fraction}")


@dataclass(frozen=True)
class TrainConfig:
    model: BppConfig
    loss: str = "l1"
    batch: int = 16
    patch: int = 48
    steps: int = 1000
    lr0: float = 1e-4
    lr_half_every: int = 200000
    seed: int = 0
    val_every: int = 100
    augment: bool = True

    def __post_init__(self):
        if self.loss not in ("l1", "neg_ssim"):
            raise ValueError(f"loss must be 'l1' or 'neg_ssim', got {self.loss!r}")
        if self.batch < 1 or self.steps < 0 or self.val_every < 1:
            raise ValueError("batch must be >= 1, steps >= 0, val_every >= 1")
        if self.patch % self.model.scale_div:
            raise ValueError(
                f"patch {self.patch} must be divisible by 2^(L-1) = {self.model.scale_div}")
        if self.lr0 <= 0 or self.lr_half_every < 1:
            raise ValueError("lr0 must be positive and lr_half_every >= 1")


def synth_image(seed, h, w):
    """Procedural RGB image in [0, 1]: a smooth gradient plus at least one
    sharp-edged primitive (rectangles, ellipses, line bands).
    Deterministic per seed; shape (1, 3, h, w) float32."""
    if h < 16 or w < 16:
        raise ValueError(f"synth_image: dims must be >= 16, got {h}x{w}")
    rng = np.random.default_rng([0x5E5, seed])
    yy, xx = np.mgrid[0:h, 0:w]
    fy, fx = yy / h, xx / w
    base = rng.uniform(0.25, 0.75, 3)
    slope = rng.uniform(-0.4, 0.4, (3, 2))
    img = base[:, None, None] + slope[:, 0:1, None] * fy + slope[:, 1:2, None] * fx

    def paint(mask, color):
        img[:, mask] = color[:, None]

    for _ in range(int(rng.integers(1, 4))):  # rectangles, at least one
        y0 = int(rng.integers(0, h - 2))
        x0 = int(rng.integers(0, w - 2))
        y1 = int(rng.integers(y0 + 2, h + 1))
        x1 = int(rng.integers(x0 + 2, w + 1))
        m = np.zeros((h, w), dtype=bool)
        m[y0:y1, x0:x1] = True
        paint(m, rng.uniform(0.0, 1.0, 3))
    for _ in range(int(rng.integers(0, 3))):  # ellipses
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(2, h / 3), rng.uniform(2, w / 3)
        m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        paint(m, rng.uniform(0.0, 1.0, 3))
    for _ in range(int(rng.integers(0, 4))):  # line bands
        theta = rng.uniform(0, np.pi)
        d = rng.uniform(0, np.hypot(h, w))
        width = rng.uniform(0.7, 2.0)
        m = np.abs(xx * np.cos(theta) + yy * np.sin(theta) - d) <= width
        paint(m, rng.uniform(0.0, 1.0, 3))

    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


class SrDataset:
    """Degradation pairs: ground truth and per-factor impaired inputs."""

    def __init__(self, gt, impaired, factors, val_fraction):
        self.gt = gt
        self.impaired = impaired
        self.factors = tuple(factors)
        self.val_fraction = val_fraction

    def __len__(self):
        return len(self.gt)

    def pair(self, index, factor):
        return self.impaired[factor][index], self.gt[index]

    def subset(self, indices):
        gt = [self.gt[i] for i in indices]
        imp = {f: [self.impaired[f][i] for i in indices] for f in self.factors}
        return SrDataset(gt, imp, self.factors, self.val_fraction)

    def split(self):
        """Deterministic train/validation split (validation takes the tail)."""
        n = len(self.gt)
        n_val = min(n - 1, max(1, int(round(n * self.val_fraction))))
        return self.subset(range(n - n_val)), self.subset(range(n - n_val, n))


def make_pairs(spec, align=1):
    """Build the dataset: images cropped so every factor (and the network's
    2^(L-1) pyramid, via `align`) divides the dims, impaired = down-then-up.
    """
    mult = math.lcm(*spec.factors) * align
    if spec.source == "synthetic":
        raw = [(f"synthetic:{spec.seed + i}", synth_image(spec.seed + i, spec.size, spec.size))
               for i in range(spec.count)]
    else:
        import glob
        import os
        files = sorted(glob.glob(os.path.join(spec.path, "*.ppm")))
        if len(files) < 2:
            raise ValueError(
                f"dataset directory {spec.path!r} holds {len(files)} .ppm files, need >= 2")
        raw = []
        for fn in files:
            try:
                raw.append((fn, ppm_read(fn)))
            except (OSError, ValueError) as exc:
                raise ValueError(f"unreadable dataset image {fn}: {exc}") from exc

    gt = []
    for name, img in raw:
        h, w = img.shape[2], img.shape[3]
        ch, cw = (h // mult) * mult, (w // mult) * mult
        if ch == 0 or cw == 0:
            raise ValueError(
                f"image {name} is {h}x{w}, smaller than the required multiple {mult}")
        gt.append(np.ascontiguousarray(img[:, :, :ch, :cw]))
    impaired = {f: [degrade(g, f) for g in gt] for f in spec.factors}
    return SrDataset(gt, impaired, spec.factors, spec.val_fraction)


def _augment_pair(a, b, fh, fv, rot):
    # identical dihedral transform on input and target crops (c, p, p)
    if fh:
        a, b = a[:, :, ::-1], b[:, :, ::-1]
    if fv:
        a, b = a[:, ::-1, :], b[:, ::-1, :]
    if rot:
        a, b = np.rot90(a, 1, axes=(1, 2)), np.rot90(b, 1, axes=(1, 2))
    return a, b


def sample_batch(dataset, config, step):
    """Seeded batch of co-located (input, target) patch crops.

    The factor is drawn uniformly per sample; flips and a 90-degree rotation
    are applied identically to both patches when augmentation is on.
    """
    p = config.patch
    rng = np.random.default_rng([0xBA7C4, config.seed, step])
    xs, ys = [], []
    for _ in range(config.batch):
        i = int(rng.integers(0, len(dataset)))
        f = dataset.factors[int(rng.integers(0, len(dataset.factors)))]
        inp, tgt = dataset.pair(i, f)
        h, w = inp.shape[2], inp.shape[3]
        if p > h or p > w:
            raise ValueError(f"patch {p} larger than image {h}x{w}")
        oy = int(rng.integers(0, h - p + 1))
        ox = int(rng.integers(0, w - p + 1))
        a = inp[0, :, oy:oy + p, ox:ox + p]
        b = tgt[0, :, oy:oy + p, ox:ox + p]
        if config.augment:
            fh, fv, rot = (bool(v) for v in rng.integers(0, 2, 3))
            a, b = _augment_pair(a, b, fh, fv, rot)
        xs.append(np.ascontiguousarray(a))
        ys.append(np.ascontiguousarray(b))
    return np.stack(xs), np.stack(ys)


def neg_ssim_loss(pred, target):
    """1 - mean windowed SSIM (11x11 Gaussian, sigma 1.5) on the 255 scale.

    Fully on the tape, so it can drive training; value lies in [0, 2].
    """
    if pred.data.shape != target.data.shape:
        raise ValueError(
            f"neg_ssim_loss: shapes differ, {pred.data.shape} vs {target.data.shape}")
    h, w = pred.data.shape[2], pred.data.shape[3]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(
            f"neg_ssim_loss: image {h}x{w} smaller than the "
            f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    window = gaussian_window()
    x = T.scale(pred, 255.0)
    y = T.scale(target, 255.0)
    mu_x = T.filter2d_valid(x, window)
    mu_y = T.filter2d_valid(y, window)
    sxx = T.sub(T.filter2d_valid(T.mul(x, x), window), T.mul(mu_x, mu_x))
    syy = T.sub(T.filter2d_valid(T.mul(y, y), window), T.mul(mu_y, mu_y))
    sxy = T.sub(T.filter2d_valid(T.mul(x, y), window), T.mul(mu_x, mu_y))
    num = T.mul(T.add_scalar(T.scale(T.mul(mu_x, mu_y), 2.0), SSIM_C1),
                T.add_scalar(T.scale(sxy, 2.0), SSIM_C2))
    den = T.mul(T.add_scalar(T.add(T.mul(mu_x, mu_x), T.mul(mu_y, mu_y)), SSIM_C1),
                T.add_scalar(T.add(sxx, syy), SSIM_C2))
    ssim_mean = T.mean_all(T.div(num, den))
    return T.add_scalar(T.scale(ssim_mean, -1.0), 1.0)


class Adam:
    """First/second-moment optimizer with bias correction, in-place updates."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        pairs = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in pairs}
        self.v = {name: np.zeros_like(p.data) for name, p in pairs}

    def step(self, named_params, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in named_params:
            g = p.grad if p.grad is not None else 0.0
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype)


def lr_schedule(step, config):
    """lr0 halved every lr_half_every steps."""
    if step < 0:
        raise ValueError(f"lr_schedule: step must be >= 0, got {step}")
    return config.lr0 * (0.5 ** (step // config.lr_half_every))


CHECKPOINT_MAGIC = b"BPPC"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Versioned bundle: config, named float32 tensors (weights plus
    optimizer moments), step counter and sampler RNG identity."""

    config: BppConfig
    step: int
    opt_t: int
    rng: Optional[dict]
    names: list
    tensors: dict


def make_checkpoint(params, opt=None, step=0, rng=None):
    names, tensors = [], {}
    for name, t in params.named():
        names.append(name)
        tensors[name] = np.asarray(t.data, dtype=np.float32).copy()
    if opt is not None:
        for prefix, table in (("opt.m.", opt.m), ("opt.v.", opt.v)):
            for name, arr in table.items():
                names.append(prefix + name)
                tensors[prefix + name] = np.asarray(arr, dtype=np.float32).copy()
    return Checkpoint(config=params.config, step=step,
                      opt_t=opt.t if opt is not None else 0,
                      rng=rng, names=names, tensors=tensors)


def serialize_checkpoint(ckpt):
    entries = []
    blobs = []
    offset = 0
    for name in ckpt.names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": dataclasses.asdict(ckpt.config),
        "step": ckpt.step,
        "opt_t": ckpt.opt_t,
        "rng": ckpt.rng,
        "tensors": entries,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<Q", len(hb)) + hb + b"".join(blobs))


def parse_checkpoint(blob, origin="<bytes>"):
    def fail(offset, msg):
        raise ValueError(f"{origin}: {msg} (byte offset {offset})")

    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        fail(0, f"bad magic, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 16:
        fail(4, "truncated fixed header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        fail(4, f"unsupported checkpoint format version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    if len(blob) < 16 + hlen:
        fail(16, f"truncated header, need {hlen} bytes")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        fail(16, f"corrupt JSON header: {exc}")
    try:
        cfg_dict = dict(header["config"])
        cfg_dict["channels"] = tuple(cfg_dict["channels"])
        config = BppConfig(**cfg_dict)
        step = int(header["step"])
        opt_t = int(header["opt_t"])
        rng = header["rng"]
        entries = header["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        fail(16, f"invalid header contents: {exc}")
    data_start = 16 + hlen
    names, tensors = [], {}
    for ent in entries:
        shape = tuple(int(s) for s in ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = data_start + int(ent["offset"])
        end = off + 4 * count
        if end > len(blob):
            fail(off, f"truncated tensor data for {ent['name']!r}, need {4 * count} bytes")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        names.append(ent["name"])
        tensors[ent["name"]] = arr.copy()
    return Checkpoint(config=config, step=step, opt_t=opt_t, rng=rng,
                      names=names, tensors=tensors)


def save_checkpoint(path, ckpt):
    atomic_write_bytes(path, serialize_checkpoint(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    return parse_checkpoint(blob, origin=path)


def params_from_checkpoint(ckpt):
    """Rebuild network weights (and, when present, optimizer state)."""
    params = build_params(ckpt.config, seed=0)
    for name, t in params.named():
        if name not in ckpt.tensors:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != t.data.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.astype(np.float32).copy()
    opt = None
    if any(n.startswith("opt.m.") for n in ckpt.names):
        opt = Adam(params.named())
        opt.t = ckpt.opt_t
        for name in opt.m:
            opt.m[name] = ckpt.tensors["opt.m." + name].copy()
            opt.v[name] = ckpt.tensors["opt.v." + name].copy()
    return params, opt


def _evaluate(params, ds):
    """Mean squared error on the 255 scale and the matching PSNR over a
    validation split, outputs clipped to the image range."""
    se, n = 0.0, 0
    for f in ds.factors:
        for i in range(len(ds)):
            inp, gt = ds.pair(i, f)
            out = forward(T.tensor(inp), params).data
            d = (np.clip(out, 0.0, 1.0) - gt) * 255.0
            se += float(np.sum(d.astype(np.float64) ** 2))
            n += d.size
    mse = se / n
    ps = math.inf if mse == 0.0 else 10.0 * math.log10(255.0 ** 2 / mse)
    return mse, ps


def _write_log(path, rows):
    text = "step,mse,psnr\n" + "".join(
        f"{s},{mse:.8f},{ps:.6f}\n" for s, mse, ps in rows)
    atomic_write_bytes(path, text.encode())


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    params: object
    log: list  # (step, val mse on the 255 scale, val psnr)


def train(config, dataset, log_path=None):
    """Run the loop; aborts on non-finite loss, logs validation every
    val_every steps, returns the final checkpoint and the log rows."""
    train_ds, val_ds = dataset.split()
    params = build_params(config.model, config.seed)
    opt = Adam(params.named())
    log = []
    for step in range(config.steps + 1):
        if step % config.val_every == 0 or step == config.steps:
            mse, ps = _evaluate(params, val_ds)
            log.append((step, mse, ps))
            if log_path is not None:
                _write_log(log_path, log)
        if step == config.steps:
            break
        xb, yb = sample_batch(train_ds, config, step)
        x, y = T.tensor(xb), T.tensor(yb)
        out = forward(x, params)
        loss = T.l1_loss(out, y) if config.loss == "l1" else neg_ssim_loss(out, y)
        value = loss.item()
        if not math.isfinite(value):
            raise RuntimeError(f"training aborted: non-finite loss at step {step}")
        T.zero_grads(params.tensors())
        T.backward(loss)
        opt.step(params.named(), lr_schedule(step, config))
    ckpt = make_checkpoint(
        params, opt, step=config.steps,
        rng={"sampler": "counter", "seed": config.seed, "next_step": config.steps})
    return TrainResult(checkpoint=ckpt, params=params, log=log)
