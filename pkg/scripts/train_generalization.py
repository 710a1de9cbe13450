"""Train the toy model on 64 synthetic scenes, then score novel views on 8 held-out scenes.

Protocol: 10 input views at interval 3 per held-out scene, every in-between frame
is a novel view.  Trained and random-weight models are scored without pruning and
with pruning at the mean confidence.  Training stops at --steps or --hours,
whichever comes first.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from splatstream import pipeline as pl
from splatstream import synthscene as ss
from splatstream.backbone import BackboneConfig
from splatstream.evaluate import evaluate_scene


def build_scenes(n_train, n_test, n_frames, res, seed):
    specs = ss.make_specs(n_train + n_test, n_frames=n_frames, res=res, seed=seed)
    scenes = [ss.generate_sample(s) for s in specs]
    return scenes[:n_train], scenes[n_train:]


def score(model, scenes):
    rows = []
    for k, scene in enumerate(scenes):
        full, pruned = evaluate_scene(model, scene, n_views=10, interval=3, conf_thresholds=(None, "mean"))
        rows.append({
            "scene": k, "psnr": full.mean_psnr, "ssim": full.mean_ssim, "psnr_pruned": pruned.mean_psnr,
            "kept": pruned.gaussians_post_prune, "total": full.gaussians_pre_prune, "fps": full.fps,
        })
    return {
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
        "mean_psnr_pruned": float(np.mean([r["psnr_pruned"] for r in rows])),
        "scenes": rows,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/generalization")
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--hours", type=float, default=8.0)
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=2024)
    ap.add_argument("--frames", type=int, default=60)
    ap.add_argument("--checkpoint-every", type=int, default=250)
    ap.add_argument("--eval-only", default=None, help="skip training and score this checkpoint")
    args = ap.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    train, test = build_scenes(64, 8, args.frames, 64, args.data_seed)
    print(f"generated {len(train)}+{len(test)} scenes in {time.perf_counter() - t0:.0f}s", flush=True)

    random_model = pl.Model(BackboneConfig(seed=args.seed))
    if args.eval_only:
        model, steps_done, train_s = pl.Model.load(args.eval_only), None, None
    else:
        model = pl.Model(BackboneConfig(seed=args.seed))
        cfg = pl.TrainConfig(batch=args.batch, lr=args.lr, seed=args.seed, steps=args.steps, checkpoint_every=0)
        deadline = time.perf_counter() + 3600.0 * args.hours
        t_train = time.perf_counter()
        with open(out / "train_log.jsonl", "w") as fh:
            trainer = pl.Trainer(model, train, cfg, log_fh=None)
            steps_done = 0
            while steps_done < args.steps and time.perf_counter() < deadline:
                t_step = time.perf_counter()
                rep = trainer.run(1)[-1]
                trainer.history.clear()
                steps_done += 1
                fh.write(rep.to_json(steps_done, step_ms=round(1000 * (time.perf_counter() - t_step), 1),
                                     grad_norm=rep.grad_norm) + "\n")
                fh.flush()
                if steps_done % args.checkpoint_every == 0:
                    model.save(out / "latest.ckpt")
                    print(f"step {steps_done} total {rep.total:+.4f} regr {rep.l_regr:.4f} mmse {rep.l_mmse:.4f} "
                          f"({time.perf_counter() - t_train:.0f}s)", flush=True)
        train_s = time.perf_counter() - t_train
        model.save(out / "latest.ckpt")

    trained = score(model, test)
    untrained = score(random_model, test)
    summary = {
        "steps": steps_done,
        "train_seconds": train_s,
        "trained": trained,
        "random": untrained,
        "gain_db": trained["mean_psnr"] - untrained["mean_psnr"],
        "prune_drop_db": trained["mean_psnr"] - trained["mean_psnr_pruned"],
    }
    summary["passes"] = bool(
        trained["mean_psnr"] >= 18.0 and summary["gain_db"] >= 6.0 and summary["prune_drop_db"] <= 0.5
    )
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps({k: summary[k] for k in ("steps", "gain_db", "prune_drop_db", "passes")}
                     | {"psnr": trained["mean_psnr"], "psnr_random": untrained["mean_psnr"]}, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
