"""Overfit the toy model on one fixed synthetic clip and report the loss ratio."""

import argparse
import json
import sys
import time

import numpy as np

from splatstream import pipeline as pl
from splatstream import synthscene as ss


def run_overfit(steps=500, seed=0, scene_seed=3, log_path=None, verbose=True):
    scene = ss.generate_sample(ss.SceneSpec(seed=scene_seed, n_frames=60))
    cfg = pl.TrainConfig(batch=1, steps=steps, seed=seed, checkpoint_every=0)
    clip = pl.sample_clip(scene, cfg, np.random.default_rng(seed))
    model = pl.Model()
    fh = open(log_path, "w") if log_path else None
    trainer = pl.Trainer(model, [scene], cfg, log_fh=fh)
    t0 = time.perf_counter()
    hist = []
    for step in range(1, steps + 1):
        hist += trainer.run(1, fixed_clips=[clip])[-1:]
        trainer.history.clear()
        if verbose and (step == 1 or step % 25 == 0):
            r = hist[-1]
            print(f"step {step:4d} total {r.total:+.4f} conf {r.l_conf:+.4f} mmse {r.l_mmse:.4f} "
                  f"regr {r.l_regr:.4f} ({time.perf_counter() - t0:.0f}s)", flush=True)
    if fh:
        fh.close()
    first, last = hist[0], hist[-1]
    return {
        "steps": steps,
        "seconds": time.perf_counter() - t0,
        "total_first": first.total,
        "total_last": last.total,
        "regr_first": first.l_regr,
        "regr_last": last.l_regr,
        "mmse_first": first.l_mmse,
        "mmse_last": last.l_mmse,
        "passes": last.total <= first.total / 10.0,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--log", default=None)
    ap.add_argument("--out", default=None, help="write the summary JSON here")
    args = ap.parse_args(argv)
    summary = run_overfit(args.steps, args.seed, log_path=args.log)
    print(json.dumps(summary, indent=1))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
