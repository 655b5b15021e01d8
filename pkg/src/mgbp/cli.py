"""``mgbp`` command-line entry point.

Every subcommand that produces files writes them under ``--out`` together
with ``effective_config.json``, the fully resolved configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import autograd as ad
from . import complexity, inference, io, metrics
from . import config as C
from . import graph as G
from . import perceptual as P
from . import trainer as T
from .tensor import bicubic_resize

log = logging.getLogger("mgbp")


class CliError(Exception):
    pass


# -- helpers --------------------------------------------------------------

def _int_tuple(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _load_config(args):
    cfg = C.load(args.config)
    if getattr(args, "seed", None) is not None:
        import dataclasses
        cfg = dataclasses.replace(
            cfg, seed=args.seed, train=dataclasses.replace(cfg.train, seed=args.seed))
    return cfg


def _out_dir(args, cfg):
    if args.out is None:
        raise CliError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(cfg.dumps())
    return out


def _generator(cfg, weights):
    graph = G.build(cfg.model, cfg.init_seed)
    if weights is not None:
        params = io.load_checkpoint(weights, cfg.model)
        missing = sorted(set(graph.params) - set(params))
        if missing:
            raise CliError(f"{weights}: checkpoint lacks {missing[0]}")
        graph = graph.with_params({k: params[k] for k in graph.params})
    return graph


def _noise_amp(args, cfg):
    return cfg.model.noise_amp if args.noise_amp is None else args.noise_amp


def _upscaled(lr, cfg):
    return bicubic_resize(lr[None], cfg.model.scale_factor, "up")


def _check_multiple(shape, cfg):
    m = G.input_multiple(cfg.model)
    if shape[-1] % m or shape[-2] % m:
        raise CliError(f"upscaled size {shape[-2:]} must be a multiple of {m}")


def _run_network(graph, X, cfg, args):
    W = _noise_amp(args, cfg)
    tile = args.tile if args.tile is not None else cfg.tiling.tile
    if tile is None:
        return inference.direct_infer(graph, X, W=W, seed=cfg.seed)
    tile = tuple(tile)[-(X.ndim - 2):]
    plan = inference.plan_tiles(
        X.shape[2:], tile,
        temporal_stride=args.stride_frames if args.stride_frames is not None
        else cfg.tiling.stride_frames,
        spatial_stride=cfg.tiling.spatial_stride, margin=cfg.tiling.margin,
        align=G.input_multiple(cfg.model))
    log.info("tiled inference with %d tiles", len(plan))
    return inference.tiled_infer(graph, X, plan, W=W, seed=cfg.seed)


def _images_from(paths):
    out = []
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.png")) if p.is_dir() else [p]
        out.extend(io.read_png(f) for f in files)
    return out


# -- subcommands ----------------------------------------------------------

def describe_text(cfg, input_shape=None):
    model = cfg.model
    if input_shape is None:
        m = G.input_multiple(model)
        side = m * max(1, math.ceil(32 / m))
        input_shape = (1, model.image_channels) + (
            (37,) if model.dims == 3 else ()) + (side, side)
    graph = G.build(model, cfg.init_seed)
    trace = G.trace_shapes(model, input_shape)
    rows = {r.tag: r for r in trace.module_rows()}
    lines = [f"MGBP {model.dims}D  levels={model.levels} mu={model.mu} "
             f"factor={model.scale_factor}",
             "channels (high to low resolution): " + "-".join(str(c) for c in model.channels),
             f"input shape {tuple(input_shape)}",
             f"modules: {len(graph.tags)}  leaf BP calls: {trace.leaf_calls}"]
    for tag in graph.tags:
        name = str(tag)
        r = rows.get(name)
        n = sum(graph.params[name + s].size for s in (".weight", ".bias"))
        shapes = f"{r.in_shape} -> {r.out_shape}  MACs {r.macs}" if r else ""
        lines.append(f"  {name:<24} params {n:>9}  {shapes}")
    if trace.level_frames:
        lines.append("frames per level: " + ", ".join(
            f"{k}:{v}" for k, v in sorted(trace.level_frames.items(), reverse=True)))
        lines.append(f"volume saving at the coarsest level: {100 * trace.volume_saving():.1f}%")
    lines.append(f"parameters: {graph.param_count()}")
    lines.append(f"total MACs: {trace.total_macs()}")
    lines.append(f"peak activation bytes: {trace.peak_bytes}")
    return "\n".join(lines)


def cmd_describe(args):
    cfg = _load_config(args)
    shape = None
    if args.input_shape is not None:
        shape = (1, cfg.model.image_channels) + args.input_shape
    text = describe_text(cfg, shape)
    print(text)
    if args.out is not None:
        out = _out_dir(args, cfg)
        (out / "describe.txt").write_text(text + "\n")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    images = _images_from(args.images or cfg.paths.train_images)
    if not images:
        raise CliError("no training images (use --images or paths.train_images)")
    val = None
    if cfg.paths.validation_images:
        f = cfg.model.scale_factor
        val = [(T.degrade(v[None], f), v[None]) for v in _images_from(cfg.paths.validation_images)]
    graph = _generator(cfg, args.weights)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as fh:
        def on_step(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        if cfg.train.mode == "fidelity":
            ck = T.train_fidelity(graph, images, cfg.train, validation=val, on_step=on_step)
        else:
            disc = P.build_discriminator(len(P.pyramid_factors(cfg.model.scale_factor)) + 1,
                                         cfg.discriminator.width, cfg.discriminator.init_seed,
                                         cfg.vnsc)
            ck, _ = T.train_perceptual(graph, disc, images, cfg.train, cfg.loss_weights,
                                       validation=val, on_step=on_step)
    io.save_checkpoint(out / "best.ckpt", ck.params, cfg.model)
    print(f"best checkpoint at step {ck.step}: validation {ck.value:.6g}")
    return 0


def cmd_infer(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    graph = _generator(cfg, args.weights)
    reports = []
    for path in _input_files(args.input):
        X = _upscaled(io.read_png(path), cfg)
        _check_multiple(X.shape, cfg)
        Y = _run_network(graph, X, cfg, args)[0]
        io.write_png(out / f"{path.stem}_x{cfg.model.scale_factor}.png", Y)
        if args.reference is not None:
            ref = io.read_png(Path(args.reference) / path.name
                              if Path(args.reference).is_dir() else args.reference)
            reports.append(metrics.evaluate(path.stem, io.to_uint8(Y).astype(float), ref,
                                            scale=cfg.model.scale_factor))
    if reports:
        metrics.write_reports(reports, out / "metrics.txt", out / "metrics.jsonl")
        for r in reports:
            print(r.text())
    return 0


def _input_files(spec):
    if spec is None:
        raise CliError("--input is required")
    p = Path(spec)
    if p.is_dir():
        files = sorted(p.glob("*.png"))
        if not files:
            raise CliError(f"{p}: no PNG files")
        return files
    if not p.is_file():
        raise CliError(f"{p}: no such file")
    return [p]


def cmd_infer_video(args):
    cfg = _load_config(args)
    if cfg.model.dims != 3:
        raise CliError("infer-video needs a 3D model config")
    out = _out_dir(args, cfg)
    graph = _generator(cfg, args.weights)
    if args.input is None:
        raise CliError("--input is required")
    cube = io.read_frames(args.input)  # (C, T, H, W)
    f = cfg.model.scale_factor
    X = bicubic_resize(cube[None], f, "up")
    _check_multiple(X.shape, cfg)
    Y = _run_network(graph, X, cfg, args)[0]
    io.write_frames(out / "frames", Y)
    print(f"wrote {Y.shape[1]} frames to {out / 'frames'}")
    return 0


def cmd_sweep(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    graph = _generator(cfg, args.weights)
    paths = _input_files(args.input)
    X = _upscaled(io.read_png(paths[0]), cfg)
    _check_multiple(X.shape, cfg)
    ref = io.read_png(args.reference)[None] if args.reference else X
    rows = inference.sweep_noise(graph, X, args.w_values, inference.default_sweep_metrics(),
                                 reference=ref, seed=cfg.seed)
    names = list(rows[0][1])
    table = ["W\t" + "\t".join(names)]
    table += [f"{W:g}\t" + "\t".join(f"{m[n]:.6g}" for n in names) for W, m in rows]
    (out / "sweep.tsv").write_text("\n".join(table) + "\n")
    with open(out / "sweep.jsonl", "w") as fh:
        for W, m in rows:
            fh.write(json.dumps({"W": W, **m}, sort_keys=True) + "\n")
    print("\n".join(table))
    return 0


def cmd_dfv(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    graph = _generator(cfg, args.weights)
    X = _upscaled(io.read_png(_input_files(args.input)[0]), cfg)
    _check_multiple(X.shape, cfg)
    if args.pixel is None:
        raise CliError("--pixel is required")
    pixel = args.pixel if len(args.pixel) == 3 else (0,) + tuple(args.pixel)
    try:
        resp = inference.dfv_impulse_response(graph, X, pixel, args.delta,
                                              W=_noise_amp(args, cfg), seed=cfg.seed)
    except IndexError as e:
        raise CliError(str(e)) from None
    io.save_tensor(out / "dfv.mgbt", resp)
    mag = np.abs(resp[0]).sum(axis=0, keepdims=True)
    peak = mag.max()
    io.write_png(out / "dfv.png", 255.0 * mag / peak if peak > 0 else mag)
    print(f"impulse response written to {out / 'dfv.mgbt'} (peak {peak:.6g})")
    return 0


def gradcheck_report(cfg, samples=30, seed=0):
    """Taped vs finite-difference gradients of the L1 pyramid loss.

    Uses a small random input whose side is a multiple of both the network
    stride and the scale factor.
    """
    model = cfg.model
    unit = math.lcm(G.input_multiple(model), model.scale_factor)
    side = unit * math.ceil(8 / unit)
    frames = (5,) if model.dims == 3 else ()
    shape = (1, model.image_channels) + frames + (side, side)
    graph = G.build(model, cfg.init_seed)
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 255, shape)
    target = X + rng.normal(0, 8, shape)

    def fn(ins, params):
        Y = G.forward(graph, ins, W=0.0, params=params)
        if model.dims == 3:
            return P.l1(Y, target)
        return P.high_fidelity_loss(Y, target, model.scale_factor)

    return ad.finite_diff_check(fn, X, graph.params, samples=samples, seed=seed,
                                guard=1e-6, details=True)


def cmd_gradcheck(args):
    cfg = _load_config(args)
    res = gradcheck_report(cfg, samples=args.samples, seed=cfg.seed)
    ok = res.max_rel_error < 1e-4
    print(f"max relative error {res.max_rel_error:.3e} over {res.checked} coordinates "
          f"({res.skipped} skipped): {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_analyze(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    model = cfg.model
    if args.input_shape is not None:
        shape = (1, model.image_channels) + args.input_shape
    else:
        m = G.input_multiple(model)
        shape = (1, model.image_channels) + ((37,) if model.dims == 3 else ()) + (4 * m, 4 * m)
    report = complexity.count_ops(model, shape)
    cmp = complexity.compare(complexity.calibrate(model, shape), model, shape)
    report.predicted = cmp.predicted
    text = report.text() + "\n" + cmp.text()
    (out / "cost.txt").write_text(text + "\n")
    (out / "cost.jsonl").write_text(report.record() + "\n")
    print(text)
    return 0


COMMANDS = {
    "describe": cmd_describe,
    "train": cmd_train,
    "infer": cmd_infer,
    "infer-video": cmd_infer_video,
    "sweep": cmd_sweep,
    "dfv": cmd_dfv,
    "gradcheck": cmd_gradcheck,
    "analyze": cmd_analyze,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mgbp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True,
                       help="JSON config file, or preset:NAME for a shipped preset")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory")
        return p

    p = add("describe", "print the unfolded network, shapes and costs")
    p.add_argument("--input-shape", type=_int_tuple, help="H,W or T,H,W")
    p = add("train", "train a generator")
    p.add_argument("--images", nargs="*", help="PNG files or directories")
    p.add_argument("--weights", help="initial checkpoint")
    for name, help_ in (("infer", "super-resolve PNG images"),
                        ("infer-video", "super-resolve a directory of PNG frames"),
                        ("sweep", "evaluate outputs over noise amplitudes"),
                        ("dfv", "frozen-activation impulse response")):
        p = add(name, help_)
        p.add_argument("--weights")
        p.add_argument("--input")
        p.add_argument("--noise-amp", type=float)
        p.add_argument("--tile", type=_int_tuple, help="T,Y,X tile extent")
        p.add_argument("--stride-frames", type=int, default=None,
                       help="temporal tile stride (default 5)")
        if name in ("infer", "sweep"):
            p.add_argument("--reference", help="ground-truth PNG (or directory)")
        if name == "sweep":
            p.add_argument("--w-values", type=_float_list,
                           default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
        if name == "dfv":
            p.add_argument("--pixel", type=_int_tuple, help="C,Y,X or Y,X")
            p.add_argument("--delta", type=float, default=1.0)
    p = add("gradcheck", "compare taped and finite-difference gradients")
    p.add_argument("--samples", type=int, default=30)
    p = add("analyze", "exact operation counts against the cost recurrence")
    p.add_argument("--input-shape", type=_int_tuple, help="H,W or T,H,W")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, G.ConfigError, io.FormatError, ValueError, OSError) as e:
        print(f"mgbp {args.command}: error: {e}".replace("\n", " "), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
