"""Command line entry point: gen-data, train, reconstruct, render, eval, gradcheck."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, SplatStreamError

IMAGE_EXT = {".png", ".jpg", ".jpeg", ".bmp"}


def _write_png(path, rgb):
    from .synthscene import quantize_rgb

    Image.fromarray(quantize_rgb(rgb)).save(path)


def _read_rgb(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def list_images(image_dir):
    files = sorted(p for p in Path(image_dir).iterdir() if p.suffix.lower() in IMAGE_EXT)
    return files


def parse_intrinsics(d):
    return (float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


# -- subcommands -------------------------------------------------------------------


def cmd_gen_data(args):
    from . import synthscene as ss

    t0 = time.perf_counter()
    specs = ss.make_specs(args.scenes, n_frames=args.frames, res=args.res, seed=args.seed)
    out = Path(args.out)
    summary = []
    for k, spec in enumerate(specs):
        sample = ss.generate_sample(spec)
        ss.write_scene(sample, out / f"scene_{k:04d}")
        cov = min(ss.covisibility(sample.frames[i], sample.frames[i + 1]) for i in range(len(sample) - 1))
        summary.append({"scene": k, "seed": spec.seed, "frames": len(sample), "min_covisibility": cov})
    rep = {"scenes": summary, "seconds": time.perf_counter() - t0}
    (out / "dataset.json").write_text(json.dumps(rep, indent=1))
    print(json.dumps({"scenes": len(summary), "seconds": round(rep["seconds"], 2), "out": str(out)}))
    return 0


def cmd_train(args):
    from .backbone import BackboneConfig
    from .pipeline import Model, TrainConfig, Trainer
    from .synthscene import load_dataset

    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.steps is not None:
        cfg.steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    mcfg = BackboneConfig(**json.loads(Path(args.model_config).read_text())) if args.model_config else BackboneConfig()
    model = Model.load(args.init) if args.init else Model(mcfg)
    scenes = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    with open(out / "train_log.jsonl", "a") as fh:
        Trainer(model, scenes, cfg, out_dir=out, log_fh=fh).run()
    print(json.dumps({"steps": cfg.steps, "checkpoint": str(out / "latest.ckpt")}))
    return 0


def cmd_reconstruct(args):
    from .evaluate import PROTOCOLS
    from .gaussians import export_ply, prune
    from .losses import scale_factor
    from .metrics import EvalReport
    from .memory import MemoryConfig
    from .pipeline import Model, Session, scaled_camera
    from .rasterizer import rasterize
    from .tensor import Tensor

    files = list_images(args.images)
    interval = args.interval
    if args.views is not None and interval is None:
        interval = PROTOCOLS.get(args.views, 1)
    interval = interval or 1
    files = files[args.start :: interval]
    if args.views is not None:
        files = files[: args.views]
    if len(files) < 2:
        raise ContractError("sequence of >= 2 frames required")
    model = Model.load(args.ckpt)
    images = [_read_rgb(f) for f in files]
    mem_cfg = MemoryConfig(n_working=args.n_working)
    t0 = time.perf_counter()
    session = Session(model, mem_cfg)
    session.run(images)
    wall = time.perf_counter() - t0
    field = session.global_field
    pruned = prune(field, args.conf_threshold)
    export_ply(pruned, args.out)
    if args.memory_dump:
        session.bank.dump_json(args.memory_dump)
    rep = EvalReport(
        wall_time_s=wall, fps=len(images) / wall, n_frames=len(images),
        gaussians_pre_prune=len(field), gaussians_post_prune=len(pruned), conf_threshold=args.conf_threshold,
    )
    if args.render_views:
        spec = json.loads(Path(args.render_views).read_text())
        intr = parse_intrinsics(spec["intrinsics"])
        scale = 1.0
        if spec.get("z_gt"):
            pred = np.stack([e.xyz.data for e in session.emissions])
            valid = np.ones(pred.shape[:-1], dtype=bool)
            scale = float(scale_factor(Tensor(pred, dtype=np.float64), valid).data) / float(spec["z_gt"])
        render_dir = Path(args.render_out or Path(args.out).with_suffix("")).resolve()
        render_dir.mkdir(parents=True, exist_ok=True)
        for view in spec["views"]:
            cam = scaled_camera(np.asarray(view["w2c"], dtype=np.float64).reshape(4, 4), intr, scale)
            rgb = np.clip(rasterize(pruned, cam).rgb, 0.0, 1.0)
            name = view["name"]
            _write_png(render_dir / f"{name}.png", rgb)
            if args.gt_dir:
                gt_path = Path(args.gt_dir) / f"{name}.png"
                if gt_path.exists():
                    rep.add(name, rgb, _read_rgb(gt_path))
    out = rep.to_dict()
    out["peak_primitives"] = len(field)
    if args.report:
        Path(args.report).write_text(json.dumps(out, indent=1))
    print(json.dumps({k: out[k] for k in ("n_frames", "wall_time_s", "fps", "peak_primitives", "gaussians_post_prune", "mean_psnr")}))
    return 0


def cmd_render(args):
    from .gaussians import import_ply
    from .rasterizer import Camera, load_pose_json, rasterize

    field = import_ply(args.ply)
    w2c = load_pose_json(args.pose)
    intr = parse_intrinsics(json.loads(Path(args.intrinsics).read_text()))
    cam = Camera.from_w2c(w2c, *intr)
    bg = tuple(float(v) for v in args.background.split(","))
    if len(bg) != 3:
        raise ContractError("--background needs three comma-separated values")
    out = rasterize(field, cam, bg)
    _write_png(args.out, out.rgb)
    return 0


def cmd_eval(args):
    from .metrics import EvalReport

    pred = {p.stem: p for p in list_images(args.pred)}
    gt = {p.stem: p for p in list_images(args.gt)}
    common = sorted(set(pred) & set(gt))
    if not common:
        raise ContractError("no image names shared between --pred and --gt")
    rep = EvalReport()
    for name in common:
        rep.add(name, _read_rgb(pred[name]), _read_rgb(gt[name]))
    rep.write(args.out)
    print(json.dumps({"views": len(common), "mean_psnr": rep.mean_psnr, "mean_ssim": rep.mean_ssim}))
    return 0


def cmd_gradcheck(args):
    from .checks import model_gradcheck, primitive_gradchecks, rasterizer_gradchecks

    ok = True
    prim = primitive_gradchecks(args.seed)
    for name, err in prim.items():
        passed = err < 1e-5
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} primitive {name:<14s} rel.err {err:.2e}")
    ras = rasterizer_gradchecks(args.seed)
    for key, errs in ras.items():
        passed = max(errs) < 1e-5
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} rasterizer {key:<12s} max rel.err {max(errs):.2e} over {len(errs)} fields")
    if args.model:
        errs = model_gradcheck(args.seed, max_tensors=args.max_tensors)
        worst = max(errs.values())
        passed = worst < 1e-3
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} model+loss (f32) max rel.err {worst:.2e} over {len(errs)} tensors")
    return 0 if ok else 1


# -- parser ----------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="splatstream", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=64)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="TrainConfig JSON")
    p.add_argument("--model-config", default=None, help="BackboneConfig JSON")
    p.add_argument("--init", default=None, help="start from this checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="stream an image folder into a Gaussian field")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--conf-threshold", type=float, default=1.0)
    p.add_argument("--views", type=int, default=None, help="number of input views (2, 10, 50 use intervals 5, 3, 2)")
    p.add_argument("--interval", type=int, default=None, help="frame sampling interval")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--n-working", type=int, default=4)
    p.add_argument("--render-views", default=None, help="POSES.json with views to render")
    p.add_argument("--render-out", default=None)
    p.add_argument("--gt-dir", default=None, help="ground-truth images named like the views")
    p.add_argument("--report", default=None, help="write the EvalReport JSON here")
    p.add_argument("--memory-dump", default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("render", help="render a PLY from one pose")
    p.add_argument("--ply", required=True)
    p.add_argument("--pose", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--background", default="0,0,0")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM between two image folders")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of the autodiff core and renderer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", action="store_true", help="also check the full model + loss")
    p.add_argument("--max-tensors", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SplatStreamError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
