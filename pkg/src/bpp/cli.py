"""Command-line entry point.

Subcommands cover the full workflow: synthesize a dataset, train, run
inference (whole-image or tiled), run the classical back-projection
iteration, emit the residual heatmap and the affine decomposition, and
compute metrics.  Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import analysis, tiling
from . import tensor as T
from .network import BppConfig, build_params, forward, paper_config, param_count
from .ppm import atomic_write_bytes, pgm_write, ppm_read, ppm_write
from .resample import IbpProblem, bicubic_pair, bicubic_resize, ibp_run
from .train import (
    DatasetSpec,
    TrainConfig,
    load_checkpoint,
    make_pairs,
    params_from_checkpoint,
    save_checkpoint,
    synth_image,
    train,
)

_MODEL_KEYS = {
    "preset", "levels", "depth", "channels", "use_instance_norm", "init_scheme",
    "noise_sigma", "expansion", "freeze_lowest_update", "identity_update_mode",
}
_TRAIN_KEYS = {"loss", "batch", "patch", "steps", "lr0", "lr_half_every", "seed",
               "val_every", "augment"}
_DATA_KEYS = {"factors", "val_fraction"}
_TILE_KEYS = {"patch", "stride"}
_TOP_KEYS = {"model", "train", "data", "tile"}


def _reject_unknown(section, keys, allowed):
    unknown = sorted(set(keys) - allowed)
    if unknown:
        raise ValueError(
            f"unknown key(s) {unknown} in config section {section!r}; "
            f"allowed: {sorted(allowed)}")


def load_run_config(path):
    """Strict JSON run configuration; unknown keys anywhere are rejected."""
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a JSON object")
    _reject_unknown("<top>", raw.keys(), _TOP_KEYS)

    model_raw = dict(raw.get("model", {}))
    _reject_unknown("model", model_raw.keys(), _MODEL_KEYS)
    preset = model_raw.pop("preset", None)
    if preset is not None:
        if preset != "paper":
            raise ValueError(f"unknown model preset {preset!r}")
        depth = model_raw.pop("depth", 16)
        model = paper_config(depth=depth, **model_raw)
    else:
        model_raw.setdefault("levels", 3)
        model_raw.setdefault("depth", 4)
        model_raw.setdefault("channels", (32, 16, 8))
        model_raw["channels"] = tuple(model_raw["channels"])
        model = BppConfig(**model_raw)

    train_raw = dict(raw.get("train", {}))
    _reject_unknown("train", train_raw.keys(), _TRAIN_KEYS)
    tcfg = TrainConfig(model=model, **train_raw)

    data_raw = dict(raw.get("data", {}))
    _reject_unknown("data", data_raw.keys(), _DATA_KEYS)

    tile_raw = dict(raw.get("tile", {}))
    _reject_unknown("tile", tile_raw.keys(), _TILE_KEYS)
    return {"model": model, "train": tcfg, "data": data_raw, "tile": tile_raw}


def _cmd_make_dataset(args):
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        img = synth_image(args.seed + i, args.size, args.size)
        ppm_write(os.path.join(args.out, f"img_{i:04d}.ppm"), img)
    manifest = {"count": args.count, "size": args.size, "seed": args.seed,
                "factors": [int(f) for f in args.factors.split(",")]}
    atomic_write_bytes(os.path.join(args.out, "manifest.json"),
                       (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode())
    print(f"wrote {args.count} images to {args.out}")
    return 0


def _dataset_factors(args_data_dir, cfg_data):
    if "factors" in cfg_data:
        return tuple(int(f) for f in cfg_data["factors"])
    manifest = os.path.join(args_data_dir, "manifest.json")
    if os.path.exists(manifest):
        with open(manifest, "r", encoding="utf-8") as f:
            return tuple(int(x) for x in json.load(f)["factors"])
    return (2,)


def _cmd_train(args):
    cfg = load_run_config(args.config)
    tcfg = cfg["train"]
    spec = DatasetSpec(
        source="dir",
        path=args.data,
        factors=_dataset_factors(args.data, cfg["data"]),
        val_fraction=cfg["data"].get("val_fraction", 0.125),
    )
    dataset = make_pairs(spec, align=tcfg.model.scale_div)
    result = train(tcfg, dataset, log_path=args.log)
    save_checkpoint(args.out, result.checkpoint)
    last = result.log[-1]
    print(f"trained {tcfg.steps} steps; final val mse={last[1]:.6f} psnr={last[2]:.4f}")
    return 0


def _load_net(path):
    ckpt = load_checkpoint(path)
    params, _ = params_from_checkpoint(ckpt)
    return ckpt, params


def _cmd_infer(args):
    _, params = _load_net(args.ckpt)
    img = ppm_read(args.infile)
    if args.factor is not None:
        n, c, h, w = img.shape
        img = bicubic_resize(img, h * args.factor, w * args.factor)
    if args.patch is not None:
        stride = args.stride if args.stride is not None else 16
        plan = tiling.plan_tiles(img.shape[2], img.shape[3], args.patch, stride)

        def run(tiles):
            return forward(T.tensor(tiles), params).data

        out = tiling.stitch(run, img, plan)
    else:
        out = forward(T.tensor(img), params).data
    ppm_write(args.out, np.clip(out, 0.0, 1.0))
    return 0


def _cmd_ibp(args):
    x = ppm_read(args.infile)
    up, down = bicubic_pair(args.factor)
    h, norms = ibp_run(IbpProblem(x=x, up=up, down=down, iters=args.iters))
    ppm_write(args.out, np.clip(h, 0.0, 1.0))
    if args.log is not None:
        text = "iter,residual_l2\n" + "".join(
            f"{i},{r:.10g}\n" for i, r in enumerate(norms))
        atomic_write_bytes(args.log, text.encode())
    print(f"residual {norms[0]:.6g} -> {norms[-1]:.6g} after {args.iters} iterations")
    return 0


def _cmd_probe(args):
    _, params = _load_net(args.ckpt)
    import glob
    files = sorted(glob.glob(os.path.join(args.data, "*.ppm")))
    if not files:
        raise ValueError(f"no .ppm images under {args.data!r}")
    d = params.config.scale_div
    images = []
    for fn in files:
        img = ppm_read(fn)
        h, w = img.shape[2], img.shape[3]
        images.append(img[:, :, :(h // d) * d, :(w // d) * d])
    heat = analysis.residual_heatmap(params, images)
    heat.to_csv(args.out)
    if args.pgm is not None:
        heat.to_pgm(args.pgm)
    return 0


def _range_map(img):
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    if span == 0.0:
        return np.zeros_like(img), lo, hi
    return (img - lo) / span, lo, hi


def _cmd_linscope(args):
    _, params = _load_net(args.ckpt)
    img = ppm_read(args.infile)
    d = params.config.scale_div
    h, w = img.shape[2], img.shape[3]
    if h % d or w % d:
        raise ValueError(f"input {h}x{w} must be divisible by {d}; crop or pad first")
    fx, r = analysis.decompose(params, img)
    for path, data, label in ((args.out_fx, fx, "Fx"), (args.out_r, r, "r")):
        mapped, lo, hi = _range_map(data)
        ppm_write(path, mapped)
        sidecar = (f"{label} affine range mapping\nmin={lo!r}\nmax={hi!r}\n"
                   f"pixel = round(255 * (value - min) / (max - min))\n")
        atomic_write_bytes(path + ".range.txt", sidecar.encode())
    return 0


def _cmd_metrics(args):
    a = ppm_read(args.a)
    b = ppm_read(args.b)
    ps = analysis.psnr(a, b, mode=args.mode)
    ss = analysis.ssim(a, b, mode=args.mode)
    ps_text = "inf" if math.isinf(ps) else f"{ps:.4f}"
    print(f"psnr={ps_text} ssim={ss:.6f}")
    return 0


def _cmd_params(args):
    if args.ckpt is not None:
        _, params = _load_net(args.ckpt)
    else:
        cfg = load_run_config(args.config)
        params = build_params(cfg["model"], seed=0)
    print(param_count(params))
    return 0


def build_parser():
    ap = argparse.ArgumentParser(
        prog="bpp",
        description="Multi-resolution residual image enhancement. "
                    "Set BPP_THREADS=1 for the deterministic reference mode.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="write a synthetic PPM corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of images")
    p.add_argument("--size", type=int, required=True, help="image side length in pixels")
    p.add_argument("--factors", default="2",
                   help="comma-separated scale factors recorded in the manifest (default: 2)")
    p.add_argument("--seed", type=int, default=0, help="base RNG seed (default: 0)")
    p.set_defaults(func=_cmd_make_dataset)

    p = sub.add_parser("train", help="train on a PPM directory")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--data", required=True, help="dataset directory of .ppm files")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", required=True, help="CSV validation log path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="enhance one image")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--in", dest="infile", required=True, help="input PPM")
    p.add_argument("--out", required=True, help="output PPM")
    p.add_argument("--factor", type=int, default=None,
                   help="bicubic pre-upscale factor (default: none)")
    p.add_argument("--patch", type=int, default=None,
                   help="tile size for windowed tiled inference (default: whole image)")
    p.add_argument("--stride", type=int, default=None,
                   help="tile stride (default: 16 when --patch is given)")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("ibp", help="classical linear back-projection upscaling")
    p.add_argument("--in", dest="infile", required=True, help="low-resolution input PPM")
    p.add_argument("--factor", type=int, required=True, choices=(2, 3, 4, 8),
                   help="upscale factor")
    p.add_argument("--iters", type=int, required=True, help="iteration count")
    p.add_argument("--out", required=True, help="output PPM")
    p.add_argument("--log", default=None, help="CSV of residual norms (default: none)")
    p.set_defaults(func=_cmd_ibp)

    p = sub.add_parser("probe", help="residual-update heatmap over a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="directory of .ppm probe images")
    p.add_argument("--out", required=True, help="CSV output (levels x depth)")
    p.add_argument("--pgm", default=None, help="optional PGM rendering path")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("linscope", help="affine decomposition y = Fx + r")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--in", dest="infile", required=True, help="probe PPM")
    p.add_argument("--out-fx", required=True, help="output PPM for the filtered part")
    p.add_argument("--out-r", required=True, help="output PPM for the fixed residual")
    p.set_defaults(func=_cmd_linscope)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two images")
    p.add_argument("--a", required=True, help="first PPM")
    p.add_argument("--b", required=True, help="second PPM")
    p.add_argument("--mode", default="rgb", choices=("rgb", "y_m", "y_p"),
                   help="channel mode (default: rgb)")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("params", help="count learnable parameters")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt", help="checkpoint path")
    g.add_argument("--config", help="JSON run configuration")
    p.set_defaults(func=_cmd_params)
    return ap


def dispatch(argv):
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors; usage errors are 1 here
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
