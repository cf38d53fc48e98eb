"""Command-line interface.

Verbs: gen-data, heatmap, occlusion-check, train, eval, grad-check, sweep.
A single JSON config file drives every verb; ``--set key=value`` overrides
individual fields.  Exit codes: 0 success, 1 config error, 2 numeric
failure, 3 I/O error.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import containers, model, runner, synth
from .config import RunConfig
from .errors import ConfigError, GazeRegError, NumericError, ParseError
from .flow import (
    DEFAULT_EPSILON_PX,
    DEFAULT_ETA,
    BlockMatchFlowProvider,
    FileFlowProvider,
    estimate_flow_blockmatch,
    occlusion_check,
)
from .heatmap import binarize, gaussian_splat, save_heatmap
from .ingest import AGGREGATED, SINGULAR, align_window, parse_frame_manifest, parse_gaze_csv

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def load_config(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        with open(args.config) as f:
            cfg = RunConfig.from_json(f.read())
    overrides = getattr(args, "set", None) or []
    if overrides:
        cfg = cfg.apply_overrides(overrides)
    return cfg.validate()


def _read_image(path):
    if path.endswith(".npy"):
        return np.load(path)
    return containers.read_image(path)


def cmd_gen_data(args):
    cfg = load_config(args)
    splits = synth.generate(cfg)
    synth.write_dataset(args.out, splits, cfg)
    sizes = {k: len(v) for k, v in splits.items()}
    print(json.dumps({"out": args.out, "splits": sizes}))
    return EXIT_OK


def cmd_heatmap(args):
    cfg = load_config(args)
    with open(args.gaze, "rb") as f:
        track = parse_gaze_csv(f.read())
    with open(args.frames) as f:
        frames = parse_frame_manifest(f.read())
    os.makedirs(args.out, exist_ok=True)
    mode = SINGULAR if args.mode == "singular" else AGGREGATED
    written = []
    for ref in frames:
        window = align_window(track, ref, mode, args.delta_ms)
        heat = gaussian_splat(window, ref.width, ref.height, args.sigma or cfg.sigma_px)
        if args.binarize_tau is not None:
            heat = binarize(heat, args.binarize_tau)
        path = os.path.join(args.out, f"heatmap_{ref.frame_id}.ghm")
        save_heatmap(path, heat)
        written.append(path)
    print(json.dumps({"written": written}))
    return EXIT_OK


def cmd_occlusion_check(args):
    with open(args.gaze, "rb") as f:
        track = parse_gaze_csv(f.read())
    with open(args.frames) as f:
        frames = parse_frame_manifest(f.read())
    if len(frames) < 2:
        raise ConfigError("occlusion-check needs at least two frames")
    frames = sorted(frames, key=lambda r: r.timestamp_ms)
    target = frames[-1]
    earlier = [f for f in frames[:-1]
               if target.timestamp_ms - args.delta_ms < f.timestamp_ms < target.timestamp_ms]

    if args.flow_dir:
        provider = FileFlowProvider(args.flow_dir)
    else:
        images = {f.frame_id: _read_image(f.image_path) for f in frames}
        provider = BlockMatchFlowProvider(images, block=args.block, search=args.search)

    results = []
    for ref in earlier:
        fwd, bwd = provider(ref, target)
        report = occlusion_check(fwd, bwd, args.epsilon, args.eta)
        results.append({
            "src_frame": ref.frame_id,
            "dst_frame": target.frame_id,
            "eta_observed": report.eta_observed,
            "verdict": report.verdict,
        })
    window = align_window(track, target, AGGREGATED, args.delta_ms)
    print(json.dumps({
        "target_frame": target.frame_id,
        "window_samples": len(window.selected),
        "checks": results,
    }, indent=2))
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args)
    workdir = args.out or cfg.out_dir or "run"
    report, _ = runner.run_experiment(cfg, workdir=workdir)
    print(report.to_json())
    return EXIT_OK


def cmd_eval(args):
    cfg = load_config(args)
    data = runner.load_or_generate(cfg)
    report = runner.evaluate(args.checkpoint, data[args.split], cfg)
    print(report.to_json())
    return EXIT_OK


def cmd_grad_check(args):
    cfg = load_config(args)
    if not args.full_size:
        cfg = cfg.replace(
            n_h=2, n_v=2, patch_px=4, channels=1, d_model=8, d_ctx=8, d_hidden=8,
            vocab_size=16, tau_o=3, tau_a=1, tokens_per_frame=2, n_classes=4,
            pseudo_widths=(4, 8), n_train=4, n_val=0, n_test=0, occl_event_p=0.0,
        ).validate()
    data = synth.generate(cfg)
    batch = [runner.preprocess(s, cfg, is_train=True) for s in data["train"][:2]]
    state = model.init_state(cfg)
    errors = model.finite_difference_check(state, batch, step=args.step)
    worst = 0.0
    for name in sorted(errors):
        print(f"{name:24s} max_rel_err={errors[name]:.3e}")
        worst = max(worst, errors[name])
    print(f"worst: {worst:.3e} (threshold {args.threshold})")
    if worst >= args.threshold:
        raise NumericError(f"gradient check failed: {worst:.3e} >= {args.threshold}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = load_config(args)
    values = json.loads(args.values)
    if not isinstance(values, list):
        raise ConfigError("--values must be a JSON array")
    if not values:
        print(json.dumps({"rows": []}))
        return EXIT_OK
    seeds = tuple(json.loads(args.seeds))
    rows = runner.sweep(cfg, args.axis, values, seeds=seeds, workdir=args.out)
    means = runner.sweep_means(rows)
    print(json.dumps({"rows": rows, "mean_token_accuracy": {str(k): v for k, v in means.items()}},
                     indent=2, default=str))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="gazereg")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (repeatable)")

    p = sub.add_parser("gen-data", help="generate and write a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("heatmap", help="build gaze heatmaps for a frame manifest")
    common(p)
    p.add_argument("--gaze", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["singular", "aggregated"], default="aggregated")
    p.add_argument("--delta-ms", type=int, default=200)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--binarize-tau", type=float, default=None)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("occlusion-check", help="flow-consistency occlusion check")
    p.add_argument("--frames", required=True)
    p.add_argument("--gaze", required=True)
    p.add_argument("--delta-ms", type=int, default=200)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON_PX)
    p.add_argument("--eta", type=float, default=DEFAULT_ETA)
    p.add_argument("--flow-dir", help="directory of precomputed GFL1 flows")
    p.add_argument("--block", type=int, default=8)
    p.add_argument("--search", type=int, default=6)
    p.set_defaults(func=cmd_occlusion_check)

    p = sub.add_parser("train", help="train a variant and evaluate it")
    common(p)
    p.add_argument("--out", help="output directory (checkpoints, logs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    common(p)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--full-size", action="store_true",
                   help="check the configured model instead of the tiny default")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("sweep", help="ablation sweep over one config axis")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(runner.SWEEP_AXES))
    p.add_argument("--values", required=True, help="JSON array of axis values")
    p.add_argument("--seeds", default="[0, 1, 2]")
    p.add_argument("--out", help="directory for CSV/JSON tables")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GazeRegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
