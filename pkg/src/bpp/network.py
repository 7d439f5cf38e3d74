"""The multi-resolution back-projection network.

A configuration has L resolution levels (level 1 is the lowest resolution)
and D depth steps.  Each depth step runs one flux unit per level, lowest to
highest; a flux unit adds the residual arriving from below, sends an
upscaled residual to the level above, and a downscaled reference to the
level below for the next step.  The output is the input image plus a
synthesized residual from the highest-resolution state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .resample import bicubic_down2_kernel9

__all__ = [
    "BppConfig",
    "BppParams",
    "ConvP",
    "FluxP",
    "NormP",
    "PyramidState",
    "Recorder",
    "build_params",
    "flux",
    "flux_block",
    "forward",
    "initialize_pyramid",
    "paper_config",
    "param_count",
    "run_flux_blocks",
]

IMAGE_CHANNELS = 3
INIT_SCHEMES = ("in_default", "dirac_noise")


@dataclass(frozen=True)
class BppConfig:
    """Structural hyperparameters.

    channels runs from the lowest to the highest resolution level.
    expansion widens the hidden layer inside the update and upscale paths.
    identity_update_mode and freeze_lowest_update exist to pin the network
    to its underlying difference-equation dynamic in tests.
    """

    levels: int
    depth: int
    channels: tuple
    use_instance_norm: bool = True
    init_scheme: str = "in_default"
    noise_sigma: float = 0.01
    expansion: int = 1
    freeze_lowest_update: bool = False
    identity_update_mode: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if len(self.channels) != self.levels:
            raise ValueError(
                f"need one channel count per level: {self.levels} levels, "
                f"{len(self.channels)} channel entries")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channel counts must be >= 1, got {self.channels}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(
                f"init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}")

    @property
    def scale_div(self):
        """Input dims must be divisible by this (2^(L-1))."""
        return 1 << (self.levels - 1)


def paper_config(depth=16, **overrides):
    """The fixed 4-level preset: channels 256/128/64/48 low to high."""
    cfg = BppConfig(levels=4, depth=depth, channels=(256, 128, 64, 48))
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class ConvP:
    w: T.Tensor
    b: Optional[T.Tensor]

    def named(self, prefix):
        yield prefix + ".w", self.w
        if self.b is not None:
            yield prefix + ".b", self.b


@dataclass
class NormP:
    gamma: T.Tensor
    beta: T.Tensor

    def named(self, prefix):
        yield prefix + ".gamma", self.gamma
        yield prefix + ".beta", self.beta


@dataclass
class FluxP:
    """Weights of one flux unit: residual update, upscale path, downscale path."""

    update_conv1: ConvP
    update_norm: Optional[NormP]
    update_conv2: ConvP
    upscale_conv1: Optional[ConvP]
    upscale_norm: Optional[NormP]
    upscale_conv2: Optional[ConvP]
    down: Optional[ConvP]

    def named(self, prefix):
        yield from self.update_conv1.named(prefix + ".update.conv1")
        if self.update_norm is not None:
            yield from self.update_norm.named(prefix + ".update.norm")
        yield from self.update_conv2.named(prefix + ".update.conv2")
        if self.upscale_conv1 is not None:
            yield from self.upscale_conv1.named(prefix + ".upscale.conv1")
            if self.upscale_norm is not None:
                yield from self.upscale_norm.named(prefix + ".upscale.norm")
            yield from self.upscale_conv2.named(prefix + ".upscale.conv2")
        if self.down is not None:
            yield from self.down.named(prefix + ".down")


@dataclass
class BppParams:
    """All learnable weights, distinct per level and per depth step."""

    config: BppConfig
    scaler_a: list          # k = 1..L-1, depthwise 9x9 image kernels
    scaler_b: list
    analysis_a: list        # k = 1..L, 3x3 conv 3 -> C_k
    analysis_b: list        # k = 1..L-1
    flux: list              # [t][k] FluxP, t = 1..D, k = 1..L
    synthesis: ConvP        # 3x3 conv C_L -> 3

    def named(self):
        """(name, tensor) pairs in a fixed, checkpoint-stable order."""
        for k, w in enumerate(self.scaler_a, start=1):
            yield f"scaler_a.{k}.w", w
        for k, w in enumerate(self.scaler_b, start=1):
            yield f"scaler_b.{k}.w", w
        for k, conv in enumerate(self.analysis_a, start=1):
            yield from conv.named(f"analysis_a.{k}")
        for k, conv in enumerate(self.analysis_b, start=1):
            yield from conv.named(f"analysis_b.{k}")
        for t, row in enumerate(self.flux, start=1):
            for k, unit in enumerate(row, start=1):
                yield from unit.named(f"flux.{t}.{k}")
        yield from self.synthesis.named("synthesis")

    def tensors(self):
        return [t for _, t in self.named()]


def param_count(params):
    """Exact number of scalar learnable parameters."""
    return sum(t.data.size for _, t in params.named())


class _Init:
    """Weight initializer: one RNG, one fixed draw order."""

    def __init__(self, config, seed, dtype):
        self.cfg = config
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def conv(self, c_out, c_in, bias=True):
        shape = (c_out, c_in, 3, 3)
        if self.cfg.init_scheme == "dirac_noise":
            w = np.zeros(shape, dtype=np.float64)
            for o in range(c_out):
                w[o, o % c_in, 1, 1] = 1.0
            w += self.rng.normal(0.0, self.cfg.noise_sigma, shape)
        else:
            std = np.sqrt(2.0 / (9.0 * c_in))
            w = self.rng.normal(0.0, std, shape)
        wt = T.Tensor(w.astype(self.dtype), requires_grad=True)
        bt = T.zeros((1, c_out, 1, 1), dtype=self.dtype, requires_grad=True) if bias else None
        return ConvP(wt, bt)

    def norm(self, c):
        if not self.cfg.use_instance_norm:
            return None
        gamma = T.Tensor(np.ones((1, c, 1, 1), dtype=self.dtype), requires_grad=True)
        beta = T.zeros((1, c, 1, 1), dtype=self.dtype, requires_grad=True)
        return NormP(gamma, beta)

    def scaler(self):
        k9 = np.repeat(bicubic_down2_kernel9(), IMAGE_CHANNELS, axis=0)
        return T.Tensor(k9.astype(self.dtype), requires_grad=True)


def build_params(config, seed, dtype=np.float32):
    """Construct all weights deterministically from the seed.

    in_default: zero-mean Gaussians, std sqrt(2 / (9 * c_in)).
    dirac_noise: identity-like center taps plus Gaussian noise (noise_sigma).
    Scalers always start as the 9x9 bicubic 2x-downscale kernel; norm affines
    start at gamma=1, beta=0, biases at 0.
    """
    init = _Init(config, seed, dtype)
    L, D, E = config.levels, config.depth, config.expansion
    ch = config.channels

    scaler_a = [init.scaler() for _ in range(L - 1)]
    scaler_b = [init.scaler() for _ in range(L - 1)]
    analysis_a = [init.conv(ch[k], IMAGE_CHANNELS) for k in range(L)]
    analysis_b = [init.conv(ch[k], IMAGE_CHANNELS) for k in range(L - 1)]

    # a bias feeding straight into instance norm is cancelled by the mean
    # subtraction, so those convs carry none when norm layers are on
    pre_norm_bias = not config.use_instance_norm
    flux_units = []
    for _t in range(D):
        row = []
        for k in range(1, L + 1):
            c = ch[k - 1]
            unit = FluxP(
                update_conv1=init.conv(E * c, c, bias=pre_norm_bias),
                update_norm=init.norm(E * c),
                update_conv2=init.conv(c, E * c),
                upscale_conv1=init.conv(E * c, 2 * c, bias=pre_norm_bias) if k < L else None,
                upscale_norm=init.norm(E * c) if k < L else None,
                upscale_conv2=init.conv(ch[k], E * c) if k < L else None,
                down=init.conv(ch[k - 2], c) if k > 1 else None,
            )
            row.append(unit)
        flux_units.append(row)

    synthesis = init.conv(IMAGE_CHANNELS, ch[L - 1])
    return BppParams(config, scaler_a, scaler_b, analysis_a, analysis_b,
                     flux_units, synthesis)


@dataclass
class PyramidState:
    """Per-level network state; list index 0 is level 1 (lowest resolution).

    x[k] are the evolving feature states, p[k] (k = 1..L-1) the references
    downscaled from the level above, s_a/s_b the image pyramids they were
    created from.
    """

    s_a: list
    s_b: list
    x: list
    p: list


class Recorder:
    """Pull-based forward observer.  Never mutates network state.

    e_in:    {(level, step): array} residual delivered to each flux unit
             (zeros at level 1, where nothing arrives from below).
    states:  {(level, step): array} copy of x after each depth step.
    nonlin:  ordered ("relu", tag, mask) / ("in", tag, mu, var) records,
             tag = (step, level, role).
    """

    def __init__(self, record_e=False, record_states=False, record_nonlin=False):
        self.record_e = record_e
        self.record_states = record_states
        self.record_nonlin = record_nonlin
        self.e_in = {}
        self.states = {}
        self.nonlin = []
        self.flux_calls = 0

    def on_flux(self, k, t, e_in, x_in):
        self.flux_calls += 1
        if self.record_e:
            if e_in is None:
                self.e_in[(k, t)] = np.zeros_like(x_in.data)
            else:
                self.e_in[(k, t)] = e_in.data.copy()

    def on_block_end(self, t, state):
        if self.record_states:
            for k, xk in enumerate(state.x, start=1):
                self.states[(k, t)] = xk.data.copy()

    def on_relu(self, tag, mask):
        if self.record_nonlin:
            self.nonlin.append(("relu", tag, mask.copy()))

    def on_in(self, tag, mu, var):
        if self.record_nonlin:
            self.nonlin.append(("in", tag, mu.copy(), var.copy()))


class LiveNonlin:
    """Standard norm-then-activation, optionally recording masks and stats."""

    def __init__(self, recorder=None):
        self.recorder = recorder

    def apply(self, x, norm, tag):
        if norm is not None:
            x = T.instance_norm(x, norm.gamma, norm.beta)
            if self.recorder is not None:
                self.recorder.on_in(tag, x.in_mu, x.in_var)
        x = T.relu(x)
        if self.recorder is not None:
            self.recorder.on_relu(tag, x.mask)
        return x


class FrozenNonlin:
    """Replays captured masks and stats, making the pass affine in the input."""

    def __init__(self, records, eps=T.INSTANCE_NORM_EPS):
        self.records = records
        self.eps = eps
        self.cursor = 0

    def _next(self, kind, tag):
        if self.cursor >= len(self.records):
            raise ValueError(f"frozen replay ran out of records at {tag}")
        rec = self.records[self.cursor]
        self.cursor += 1
        if rec[0] != kind or rec[1] != tag:
            raise ValueError(
                f"frozen replay mismatch: expected {kind}@{tag}, got {rec[0]}@{rec[1]}")
        return rec

    def apply(self, x, norm, tag):
        if norm is not None:
            _, _, mu, var = self._next("in", tag)
            dt = x.data.dtype
            inv = 1.0 / np.sqrt(var + dt.type(self.eps))
            # gamma * (x - mu) / sqrt(var + eps) + beta with frozen mu/var
            xs = T.mul(x, T.Tensor(np.broadcast_to(
                (norm.gamma.data * inv).astype(dt), x.shape).copy()))
            off = T.Tensor(np.broadcast_to(
                (norm.beta.data - norm.gamma.data * mu * inv).astype(dt), x.shape).copy())
            x = T.add(xs, off)
        _, _, mask = self._next("relu", tag)
        x = T.mul(x, T.Tensor(mask.astype(x.data.dtype)))
        return x

    def done(self):
        if self.cursor != len(self.records):
            raise ValueError(
                f"frozen replay consumed {self.cursor} of {len(self.records)} records")


def _scaler_step(img, kernel):
    return T.conv2d(img, kernel, bias=None, stride=2, depthwise=True)


def initialize_pyramid(input, params):
    """Build the multi-resolution initial state from a (n, 3, H, W) image.

    H and W must be divisible by 2^(L-1) so every level halves exactly.
    """
    cfg = params.config
    L = cfg.levels
    n, c, h, w = input.data.shape
    if c != IMAGE_CHANNELS:
        raise ValueError(f"initialize_pyramid: expected 3 image channels, got {c}")
    d = cfg.scale_div
    if h % d or w % d:
        raise ValueError(
            f"initialize_pyramid: dims {h}x{w} not divisible by {d}; "
            f"pad or tile the input first (see tiling.plan_tiles)")

    s_a = [None] * L
    s_a[L - 1] = input
    for k in range(L - 1, 0, -1):  # level k from level k+1
        s_a[k - 1] = _scaler_step(s_a[k], params.scaler_a[k - 1])

    x = [T.conv2d(s_a[k], params.analysis_a[k].w, params.analysis_a[k].b)
         for k in range(L)]

    s_b = []
    p = []
    for k in range(L - 1):
        sb = _scaler_step(s_a[k + 1], params.scaler_b[k])
        s_b.append(sb)
        p.append(T.conv2d(sb, params.analysis_b[k].w, params.analysis_b[k].b))
    return PyramidState(s_a=s_a, s_b=s_b, x=x, p=p)


def flux(e_in, x_in, p_in, unit, k, t, cfg, nonlin):
    """One flux unit at level k, depth step t.

    c = x_in + e_in; the upscale path turns [p_in, c] into the residual for
    level k+1 (skipped at the top), the downscale path turns c into the
    reference for level k-1 (skipped at the bottom), and the update path
    refines c into the new state (or passes c through in identity mode).
    """
    ck = cfg.channels[k - 1]
    if x_in.data.shape[1] != ck:
        raise ValueError(
            f"flux level {k}: state has {x_in.data.shape[1]} channels, expected {ck}")
    if e_in is not None and e_in.data.shape != x_in.data.shape:
        raise ValueError(
            f"flux level {k}: residual shape {e_in.data.shape} != state shape "
            f"{x_in.data.shape}")
    if p_in is not None and p_in.data.shape != x_in.data.shape:
        raise ValueError(
            f"flux level {k}: reference shape {p_in.data.shape} != state shape "
            f"{x_in.data.shape}")

    c = T.add(x_in, e_in) if e_in is not None else x_in

    e_out = None
    if k < cfg.levels:
        p = p_in if p_in is not None else T.zeros(x_in.data.shape, dtype=x_in.data.dtype)
        up = T.conv2d(T.concat_channels(p, c), unit.upscale_conv1.w, unit.upscale_conv1.b)
        up = nonlin.apply(up, unit.upscale_norm, (t, k, "upscale"))
        up = T.zero_insert_upsample2x(up)
        e_out = T.conv2d(up, unit.upscale_conv2.w, unit.upscale_conv2.b)

    p_out = None
    if k > 1:
        p_out = T.conv2d(c, unit.down.w, unit.down.b, stride=2)

    if cfg.identity_update_mode or (k == 1 and cfg.freeze_lowest_update):
        x_out = c
    else:
        u = T.conv2d(c, unit.update_conv1.w, unit.update_conv1.b)
        u = nonlin.apply(u, unit.update_norm, (t, k, "update"))
        u = T.conv2d(u, unit.update_conv2.w, unit.update_conv2.b)
        x_out = T.add(c, u)
    return e_out, x_out, p_out


def flux_block(state, params, t, nonlin, recorder=None):
    """One depth step: run flux units from level 1 up to level L in place.

    The reference produced at level k replaces p[k-1] for the next block;
    level k-1 has already consumed the old value this block.
    """
    cfg = params.config
    L = cfg.levels
    e = None
    for k in range(1, L + 1):
        unit = params.flux[t - 1][k - 1]
        p_in = state.p[k - 1] if k < L else None
        if recorder is not None:
            recorder.on_flux(k, t, e, state.x[k - 1])
        e_out, x_out, p_out = flux(e, state.x[k - 1], p_in, unit, k, t, cfg, nonlin)
        state.x[k - 1] = x_out
        if p_out is not None:
            state.p[k - 2] = p_out
        e = e_out
    if recorder is not None:
        recorder.on_block_end(t, state)
    return state


def run_flux_blocks(state, params, recorder=None, nonlin=None):
    """Run all D depth steps on an (possibly overridden) initial state."""
    nl = nonlin if nonlin is not None else LiveNonlin(recorder)
    for t in range(1, params.config.depth + 1):
        flux_block(state, params, t, nl, recorder)
    return state


def forward(input, params, recorder=None, nonlin=None):
    """Full pass: pyramid init, D flux blocks, output = input + synthesis."""
    state = initialize_pyramid(input, params)
    state = run_flux_blocks(state, params, recorder, nonlin)
    res = T.conv2d(state.x[-1], params.synthesis.w, params.synthesis.b)
    out = T.add(input, res)
    if nonlin is not None and isinstance(nonlin, FrozenNonlin):
        nonlin.done()
    return out
