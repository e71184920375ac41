"""``ted4`` command line: synth, train, encode, decode, render, eval, rd-sweep, stats."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_DIVERGED = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


def _seed(args, cfg=None):
    env = os.environ.get("TED4_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"TED4_SEED must be an integer, got {env!r}") from None
    if getattr(args, "seed", None) is not None:
        return args.seed
    return cfg.seed if cfg is not None else 0


def _train_config(args):
    from .config import TrainConfig, load_train_config

    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if getattr(args, "lambda_rate", None) is not None:
        cfg.weights.lambda_rate = args.lambda_rate
    if getattr(args, "voxel_size", None) is not None:
        cfg.model.voxel_size = args.voxel_size
    if getattr(args, "prior", None):
        cfg.model.prior = args.prior
    if getattr(args, "no_temporal_activation", False):
        cfg.model.temporal_activation = False
    cfg.seed = _seed(args, cfg)
    return cfg


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_container(path):
    from .container import model_from_coded, read_container

    data = Path(path).read_bytes()
    coded = read_container(data)
    return data, coded, model_from_coded(coded)


def _check_match(model, scene):
    if model.config.n_frames != scene.n_frames:
        raise MismatchError(f"container was trained on {model.config.n_frames} frames, scene has {scene.n_frames}")


def _histograms(model):
    from .temporal import duration_histogram

    tau = model.anchors.tau.detach()
    dynamic = (model.anchors.temporal_logit.detach() > 0).numpy()
    return duration_histogram(tau), duration_histogram(tau, dynamic)


# -- commands ------------------------------------------------------------------------

def cmd_synth(args):
    from .anchors import save_scene
    from .scenes import SCENES, make_scene

    if args.scene not in SCENES:
        raise UsageError(f"unknown scene {args.scene!r}; choose from {', '.join(SCENES)}")
    scene = make_scene(args.scene, seed=_seed(args), n_frames=args.frames, resolution=args.resolution,
                       n_cameras=args.cameras)
    save_scene(scene, args.out)
    print(json.dumps({"scene": args.scene, "out": str(args.out), "frames": scene.n_frames,
                      "cameras": len(scene.cameras), "points": len(scene.points)}))


def cmd_train(args):
    from .anchors import load_scene
    from .model import save_checkpoint
    from .training import train

    cfg = _train_config(args)
    scene = load_scene(args.scene)
    result = train(scene, cfg, log_path=args.log)
    save_checkpoint(result.model, args.out, extra={"train_config": cfg.to_dict()})
    last = result.log[-1] if result.log else {}
    print(json.dumps({"out": str(args.out), "anchors": len(result.model.anchors),
                      "iterations": cfg.iterations, "final_loss": last.get("loss")}))


def cmd_encode(args):
    from .container import quantize_model, write_container
    from .model import load_checkpoint

    model = load_checkpoint(args.model)
    data = write_container(quantize_model(model))
    Path(args.out).write_bytes(data)
    print(json.dumps({"out": str(args.out), "bytes": len(data), "anchors": len(model.anchors)}))


def cmd_decode(args):
    from .container import dequantize

    _, coded, model = _load_container(args.container)
    vals = dequantize(coded)
    arrays = {"positions": coded.positions.astype(np.float32), "offset_mask": coded.offset_mask,
              "temporal_mask": coded.temporal_mask}
    arrays.update({f"attr_{k}": v for k, v in vals.items()})
    arrays.update({f"weight_{k}": v for k, v in coded.weights.items()})
    with open(args.out, "wb") as fh:
        np.savez(fh, **arrays)
    print(json.dumps({"out": str(args.out), "anchors": coded.n_anchors}))


def cmd_render(args):
    import torch

    from .anchors import load_scene, write_image

    _, _, model = _load_container(args.container)
    scene = load_scene(args.scene)
    _check_match(model, scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cams = range(len(scene.cameras)) if args.camera is None else [args.camera]
    frames = range(scene.n_frames) if args.frame is None else [args.frame]
    n = 0
    for c in cams:
        for f in frames:
            if not (0 <= c < len(scene.cameras) and 0 <= f < scene.n_frames):
                raise UsageError(f"camera {c} / frame {f} out of range")
            with torch.no_grad():
                img, _ = model.render(scene.cameras[c], float(scene.timestamps[f]))
            write_image(out / f"cam{c:02d}_{f:03d}.png", img.image.numpy())
            n += 1
    print(json.dumps({"out": str(out), "images": n}))


def cmd_eval(args):
    from .anchors import load_scene
    from .training import evaluate

    data, _, model = _load_container(args.container)
    scene = load_scene(args.scene)
    _check_match(model, scene)
    hist_all, hist_dyn = _histograms(model)
    report = {"bytes": len(data), "anchors": len(model.anchors), **evaluate(model, scene),
              "duration_histogram": hist_all.to_dict(), "duration_histogram_dynamic": hist_dyn.to_dict()}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_rd_sweep(args):
    import copy

    from .anchors import load_scene
    from .plots import rd_curve
    from .training import bd_rate, rd_sweep

    cfg = _train_config(args)
    lambdas = args.lambdas or cfg.lambda_sweep
    scene = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = rd_sweep(scene, lambdas, cfg, out_dir=out / "containers")
    report = {"rows": [r.__dict__ for r in rows]}
    extra = {}
    if args.ablation:
        abl = copy.deepcopy(cfg)
        if args.ablation == "factorized":
            abl.model.prior = "factorized"
        else:
            abl.model.temporal_activation = False
        abl_rows = rd_sweep(scene, lambdas, abl, out_dir=out / f"containers_{args.ablation}")
        extra[args.ablation] = abl_rows
        report["ablation"] = {"mode": args.ablation, "rows": [r.__dict__ for r in abl_rows],
                              "bd_rate_percent": bd_rate([(r.bytes, r.psnr) for r in rows],
                                                         [(r.bytes, r.psnr) for r in abl_rows])}
    with open(out / "rd.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda_rate", "bytes", "psnr", "ssim"])
        for r in rows:
            w.writerow([f"{r.lambda_rate:g}", r.bytes, f"{r.psnr:.6f}", f"{r.ssim:.6f}"])
    _write_json(out / "rd.json", report)
    rd_curve(rows, out / "rd.png", extra=extra)
    print((out / "rd.csv").read_text(), end="")


def cmd_stats(args):
    from .container import section_sizes
    from .plots import duration_bars, section_bars

    data, _, model = _load_container(args.container)
    header, sections = section_sizes(data)
    hist_all, hist_dyn = _histograms(model)
    report = {
        "total_bytes": len(data), "header_bytes": header, "anchors": len(model.anchors),
        "sections": {k: {"bytes": v["bytes"], "bits": 8 * v["bytes"], "payload_bytes": v["payload_bytes"]}
                     for k, v in sections.items()},
        "duration_histogram": hist_all.to_dict(), "duration_histogram_dynamic": hist_dyn.to_dict(),
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "stats.json", report)
        with open(out / "sections.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["section", "bytes", "bits"])
            w.writerow(["header", header, 8 * header])
            for k, v in sections.items():
                w.writerow([k, v["bytes"], 8 * v["bytes"]])
        with open(out / "durations.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subset", "short_le_0.2", "medium", "long_ge_0.8", "total"])
            for name, h in (("all", hist_all), ("dynamic", hist_dyn)):
                w.writerow([name, h.short, h.medium, h.long, h.total])
        duration_bars(hist_all, out / "durations.png")
        section_bars(sections, out / "sections.png")
    print(json.dumps(report, indent=2, sort_keys=True))


# -- parser -----------------------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--config", type=Path, help="TOML or JSON training config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int, help="overridden by TED4_SEED")
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--prior", choices=["hyperprior", "factorized"])
    p.add_argument("--no-temporal-activation", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="ted4", description="Compact dynamic Gaussian scene codec (toy scale).")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic multi-view video scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--cameras", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a scene directory")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="float checkpoint (.pt)")
    p.add_argument("--log", type=Path, help="JSON-lines training log")
    p.add_argument("--lambda-rate", type=float)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="quantize and entropy-code a checkpoint")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a container to arrays (.npz)")
    p.add_argument("--container", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("render", help="render decoded frames to PNG")
    p.add_argument("--container", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True, help="scene directory providing the cameras")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--camera", type=int)
    p.add_argument("--frame", type=int)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="decode and score against a scene")
    p.add_argument("--container", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rd-sweep", help="train and encode one model per lambda_rate")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--lambdas", type=float, nargs="+")
    p.add_argument("--ablation", choices=["factorized", "no-temporal"],
                   help="also sweep an ablated model and report the BD-rate")
    _train_flags(p)
    p.set_defaults(func=cmd_rd_sweep)

    p = sub.add_parser("stats", help="duration histogram and per-section sizes")
    p.add_argument("--container", type=Path, required=True)
    p.add_argument("--out", type=Path, help="directory for stats.json, CSVs and figures")
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv=None):
    from .coder import CoderError
    from .container import FormatError
    from .training import DivergenceError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as e:
        code, msg = EXIT_USAGE, str(e)
    except DivergenceError as e:
        code, msg = EXIT_DIVERGED, str(e)
    except (FormatError, CoderError, MismatchError) as e:
        code, msg = EXIT_FORMAT, str(e)
    except OSError as e:
        code, msg = EXIT_IO, f"{e.strerror or e}: {e.filename}" if e.filename else str(e)
    except ValueError as e:
        code, msg = EXIT_USAGE, str(e)
    else:
        return EXIT_OK
    print(f"ted4: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
