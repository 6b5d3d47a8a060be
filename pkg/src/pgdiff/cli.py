"""Command line interface.

Subcommands cover the whole workflow: gen-data, train, sample, interpolate,
eval, inspect-epipolar. Every run writes a manifest.json under --out that
records the command, the fully-defaulted config and its hash, so any output
directory can be reproduced from its manifest alone.

Exit codes: 0 ok, 1 runtime error, 2 usage error, 3 config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .config import (RunConfig, ConfigError, parse_config, config_from_dict,
                     config_hash, to_dict)
from . import pipeline
from .geometry import relative_pose, epipolar_weight_matrix, epipolar_weight_map, save_pgm
from .scenes import default_intrinsics, smooth_trajectory
from .denoiser import load_checkpoint


def _load_config(args):
    cfg = parse_config(args.config) if args.config else config_from_dict({})
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _threads(args):
    return args.threads if args.threads else (os.cpu_count() or 1)


def _progress(args):
    return None if args.quiet else (lambda line: print(line, flush=True))


def cmd_gen_data(args, cfg):
    out = args.out
    train_dir, eval_dir = pipeline.gen_data(cfg, out, threads=_threads(args))
    pipeline.write_manifest(out, "gen-data", cfg,
                            {"train_dir": train_dir, "eval_dir": eval_dir,
                             "threads_note": "thread count never changes output bytes"})
    if not args.quiet:
        print(f"wrote {cfg.dataset.n_scenes} train + {cfg.dataset.eval_scenes} "
              f"eval scenes under {out}")
    return 0


def cmd_train(args, cfg):
    data_dir = args.data or cfg.paths.data_dir
    if not data_dir:
        raise ConfigError("train needs --data (or paths.data_dir in the config)")
    epipolar = False if args.cross_view else None
    den, losses = pipeline.train(cfg, data_dir, args.out, steps=args.steps,
                                 epipolar=epipolar, progress=_progress(args))
    extra = {"ckpt": os.path.join(args.out, "ckpt.pgdm"),
             "final_loss_mean_100": float(np.mean(losses[-100:])),
             "data_dir": data_dir}
    pipeline.write_manifest(args.out, "train", cfg, extra)
    if not args.quiet:
        print(f"trained {len(losses)} steps, "
              f"last-100 mean loss {extra['final_loss_mean_100']:.4f}")
    return 0


def _require_ckpt(args, cfg):
    ckpt = args.ckpt or cfg.paths.ckpt
    if not ckpt:
        raise ConfigError("this command needs --ckpt (or paths.ckpt in the config)")
    return ckpt


def cmd_sample(args, cfg):
    ckpt = _require_ckpt(args, cfg)
    pipeline.sample_cmd(cfg, ckpt, args.out, cfg.seed,
                        n_frames=args.frames,
                        epipolar=False if args.cross_view else None)
    pipeline.write_manifest(args.out, "sample", cfg, {"ckpt": ckpt})
    if not args.quiet:
        print(f"sequence written to {args.out}")
    return 0


def cmd_interpolate(args, cfg):
    ckpt = _require_ckpt(args, cfg)
    pipeline.interpolate_cmd(cfg, ckpt, args.out, cfg.seed,
                             n_frames=args.frames,
                             epipolar=False if args.cross_view else None)
    pipeline.write_manifest(args.out, "interpolate", cfg, {"ckpt": ckpt})
    if not args.quiet:
        print(f"interpolated views written to {args.out}")
    return 0


def cmd_eval(args, cfg):
    from .scenes import load_scene_dir

    frames_gt, poses, flows = load_scene_dir(args.data)
    if any(f is None for f in flows):
        raise FileNotFoundError(f"{args.data} is missing flow files")
    if args.against:
        frames_out = pipeline.load_sequence_frames(args.against)
        if len(frames_out) != len(frames_gt):
            raise ValueError(f"sequence has {len(frames_out)} frames, "
                             f"scene has {len(frames_gt)}")
    else:
        frames_out = frames_gt
    report = pipeline.eval_report(frames_out, frames_gt, flows,
                                  cfg_hash=config_hash(cfg))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        fh.write(report.to_json())
    pipeline.write_manifest(args.out, "eval", cfg,
                            {"data": args.data, "against": args.against or ""})
    print(report.table())
    return 0


def cmd_inspect_epipolar(args, cfg):
    h = w = args.res or cfg.denoiser.image_size
    K = default_intrinsics(h, w)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 30]))
    poses = smooth_trajectory(rng, max(args.pair + 1, 2), K, cfg.dataset.trajectory)
    rel = relative_pose(poses[0], poses[args.pair])
    os.makedirs(args.out, exist_ok=True)
    matrix = epipolar_weight_matrix(rel, K, h, w)
    save_pgm(os.path.join(args.out, "matrix.pgm"), matrix.values)
    pixels = []
    for spec in args.pixel or [f"{w // 2},{h // 2}"]:
        try:
            x, y = (int(v) for v in spec.split(","))
        except ValueError:
            raise ConfigError(f"--pixel wants 'x,y', got {spec!r}") from None
        if not (0 <= x < w and 0 <= y < h):
            raise ConfigError(f"--pixel {spec} outside {w}x{h}")
        m = epipolar_weight_map([float(x), float(y)], rel, K, h, w)
        save_pgm(os.path.join(args.out, f"map_{x}_{y}.pgm"), m)
        pixels.append({"pixel": [x, y], "min": float(m.min()),
                       "max": float(m.max()), "file": f"map_{x}_{y}.pgm"})
    summary = {"resolution": [h, w], "pair": [0, args.pair],
               "R": rel.R.tolist(), "t": rel.t.tolist(),
               "matrix": {"file": "matrix.pgm",
                          "min": float(matrix.values.min()),
                          "max": float(matrix.values.max())},
               "maps": pixels}
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    pipeline.write_manifest(args.out, "inspect-epipolar", cfg, {"summary": summary})
    if not args.quiet:
        print(f"weight maps written to {args.out}")
    return 0


def build_parser():
    # common flags live on the subparsers, so they are always written after
    # the command name: pgdiff train --config cfg.json --out run/
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = argparse.ArgumentParser(
        prog="pgdiff",
        description="pose-guided diffusion toolkit: synthetic multi-view data, "
                    "training, consistent sequence sampling and evaluation")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", parents=[common],
                        help="write the train/eval scene datasets")
    sp.add_argument("--out", required=True, help="dataset root directory")
    sp.add_argument("--threads", type=int,
                    help="worker threads (default: all cores); "
                         "never changes output bytes")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", parents=[common],
                        help="train a denoiser on a generated dataset")
    sp.add_argument("--data", help="dataset root (from gen-data)")
    sp.add_argument("--out", required=True, help="run directory for ckpt and logs")
    sp.add_argument("--steps", type=int, help="override training.steps")
    sp.add_argument("--cross-view", action="store_true",
                    help="train the ungated cross-view ablation")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", parents=[common],
                        help="generate a camera-trajectory sequence")
    sp.add_argument("--ckpt", help="checkpoint path")
    sp.add_argument("--out", required=True, help="sequence output directory")
    sp.add_argument("--frames", type=int, help="number of frames (default: dataset)")
    sp.add_argument("--cross-view", action="store_true",
                    help="sample with ungated cross-view attention")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("interpolate", parents=[common],
                        help="generate views between two anchors")
    sp.add_argument("--ckpt", help="checkpoint path")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--frames", type=int,
                    help="trajectory length incl. both anchors (default: dataset)")
    sp.add_argument("--cross-view", action="store_true",
                    help="sample with ungated cross-view attention")
    sp.set_defaults(fn=cmd_interpolate)

    sp = sub.add_parser("eval", parents=[common],
                        help="score frames against a ground-truth scene")
    sp.add_argument("--data", required=True, help="scene directory (from gen-data)")
    sp.add_argument("--against", help="generated sequence directory to score "
                                      "(default: score the scene against itself)")
    sp.add_argument("--out", required=True, help="report output directory")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("inspect-epipolar", parents=[common],
                        help="write epipolar weight maps for a seed-derived pose pair")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--res", type=int, help="resolution (default: denoiser size)")
    sp.add_argument("--pair", type=int, default=1,
                    help="trajectory index of the source view (default 1)")
    sp.add_argument("--pixel", action="append", metavar="X,Y",
                    help="target pixel for a single-row map (repeatable)")
    sp.set_defaults(fn=cmd_inspect_epipolar)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        return args.fn(args, cfg)
    except ConfigError as err:
        print(f"pgdiff: config error: {err}", file=sys.stderr)
        return 3
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"pgdiff: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
