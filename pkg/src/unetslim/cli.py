"""``python -m unetslim`` / ``unetslim`` command line."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import distill
from .checkpoint import Checkpoint, CheckpointError, load, load_model, save
from .compress import prune_layers
from .data import gen_dataset, stack
from .diffkit import ConfigError, ContractError
from .profiler import profile, speedup_estimate
from .sampler import SamplerSchedule, ddim_sample, trace_jsonl

log = logging.getLogger("unetslim")


def pgm_bytes(image: np.ndarray) -> bytes:
    """Binary P5 graymap of a 2-D array, min-max normalized to 0..255."""
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros_like(image) if hi == lo else (image - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def _config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.parse({})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args, cfg) -> Path:
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_profile(args) -> int:
    cfg = _config(args)
    spec = cfg.spec()
    report = profile(spec)
    doc = {"profile": report.to_dict()}
    print(report.to_table())
    other = None
    if args.compare:
        other = config_mod.load(args.compare).spec()
    elif args.pruned:
        other = prune_layers(spec, cfg.prune(spec))
    if other is not None:
        est = speedup_estimate(spec, other, overhead=args.overhead)
        doc["compare"] = {"profile": profile(other).to_dict(), "speedup": est}
        print(
            f"\nUNet FLOP reduction {100 * est['unet_flop_reduction']:.2f}%"
            f"  pipeline reduction {100 * est['pipeline_reduction']:.2f}% (overhead {est['overhead']:.2f})"
        )
    if args.out:
        (_out(args, cfg) / "profile.json").write_text(json.dumps(doc, indent=2) + "\n")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    (out / "config.json").write_text(config_mod.dumps(cfg))
    _, metrics = distill.train_teacher(cfg, out)
    print(f"teacher: {len(metrics)} steps, final task loss {metrics[-1]['L_task']:.5f}" if metrics else "teacher: 0 steps")
    return 0


def cmd_incubate(args) -> int:
    cfg = _config(args)
    if args.teacher:
        cfg = config_mod.parse({**config_mod.to_dict(cfg), "paths": {**config_mod.to_dict(cfg)["paths"], "teacher_checkpoint": args.teacher}})
    out = _out(args, cfg)
    (out / "config.json").write_text(config_mod.dumps(cfg))
    result = distill.incubation_run(cfg, out_dir=out)
    r = result.report
    print(f"divergence (output MSE): {r['initial']['output_mse']:.6g} -> {r['final']['output_mse']:.6g}")
    return 0


def _prompts(cfg, n: int) -> np.ndarray:
    if cfg.sampler.prompt is not None:
        return np.tile(np.asarray(cfg.sampler.prompt, dtype=np.int64), (n, 1))
    return stack(gen_dataset(distill.sub_seed(cfg.seed, "prompt"), n))[1]


def cmd_sample(args) -> int:
    cfg = _config(args)
    paths = dict(cfg.sampler.models)
    for item in args.checkpoint or []:
        handle, sep, path = item.partition("=")
        if not sep:
            handle, path = "model", item
        paths[handle] = path
    segments = list(cfg.sampler.segments) or [(next(iter(paths), "model"), cfg.sampler.total_steps)]
    missing = sorted({h for h, _ in segments} - set(paths))
    if missing:
        raise ConfigError(f"sampler.models: no checkpoint for handles {missing}")
    models = {h: load_model(paths[h])[0] for h, _ in segments}
    schedule = SamplerSchedule(segments, models)
    schedule.check_models()
    n = cfg.sampler.n_samples
    latents, trace = ddim_sample(schedule, _prompts(cfg, n), cfg.sampler.guidance_scale, seed=cfg.seed)
    out = _out(args, cfg)
    for i, x in enumerate(latents):
        (out / f"sample_{i:03d}.f64").write_bytes(np.ascontiguousarray(x, dtype="<f8").tobytes())
        (out / f"sample_{i:03d}.pgm").write_bytes(pgm_bytes(x[0]))
    (out / "trace.jsonl").write_text(trace_jsonl(trace))
    print(f"wrote {n} sample(s) of shape {latents.shape[1:]} to {out}")
    return 0


def inventory(ckpt: Checkpoint) -> list[str]:
    lines = []
    for name, arr in ckpt.tensors.items():
        prov = ckpt.provenance.get(name, "-")
        frozen = "frozen" if ckpt.freeze.get(name, False) else "trainable"
        lines.append(f"{name}\t{arr.dtype}\t{tuple(arr.shape)}\t{prov}\t{frozen}")
    return lines


def cmd_inspect(args) -> int:
    ckpt = load(args.path)
    print(f"# {len(ckpt.tensors)} tensors, meta {json.dumps(ckpt.meta, sort_keys=True)}")
    for line in inventory(ckpt):
        print(line)
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    n = args.n or cfg.data.size
    latents, tokens = stack(gen_dataset(cfg.seed, n))
    out = _out(args, cfg) / "dataset.asdm"
    save(out, Checkpoint(None, {"latents": latents, "tokens": tokens}, meta={"seed": cfg.seed, "n": n}))
    print(f"wrote {n} samples to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--out", help="output directory (default: paths.out_dir)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="unetslim", description="Desk-scale UNet compression toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", parents=[common], help="parameter/FLOP report per block")
    p.add_argument("--compare", metavar="CONFIG", help="second config to compare against")
    p.add_argument("--pruned", action="store_true", help="compare against the config's prune plan")
    p.add_argument("--overhead", type=float, default=0.15, help="non-UNet share of pipeline cost")
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("train-teacher", parents=[common], help="train the desk teacher")
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("incubate", parents=[common], help="two-stage prune/recombine distillation")
    p.add_argument("--teacher", help="teacher checkpoint (overrides paths.teacher_checkpoint)")
    p.set_defaults(fn=cmd_incubate)

    p = sub.add_parser("sample", parents=[common], help="DDIM sampling over a model schedule")
    p.add_argument("--checkpoint", action="append", metavar="[HANDLE=]PATH", help="model checkpoint, repeatable")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("inspect", parents=[common], help="list tensors of a checkpoint")
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("gen-data", parents=[common], help="dump a synthetic dataset")
    p.add_argument("-n", type=int, help="number of samples (default: data.size)")
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 3
    except (ContractError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
