"""Stream a 50-frame 64x64 synthetic sequence through `reconstruct` and report FPS."""

import argparse
import json
import sys
import tempfile
from pathlib import Path

from PIL import Image

from splatstream import synthscene as ss
from splatstream.cli import main as cli_main
from splatstream.pipeline import Model


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ckpt", default=None, help="defaults to a random-weight toy model")
    ap.add_argument("--frames", type=int, default=50)
    ap.add_argument("--seed", type=int, default=9)
    ap.add_argument("--out", default="runs/timing.json")
    args = ap.parse_args(argv)
    scene = ss.generate_sample(ss.SceneSpec(seed=args.seed, n_frames=max(60, args.frames), resolution=64))
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        (tmp / "frames").mkdir()
        for i, f in enumerate(scene.frames[: args.frames]):
            Image.fromarray(ss.quantize_rgb(f.rgb)).save(tmp / "frames" / f"{i:05d}.png")
        ckpt = args.ckpt
        if ckpt is None:
            ckpt = tmp / "random.ckpt"
            Model().save(ckpt)
        rc = cli_main([
            "reconstruct", "--ckpt", str(ckpt), "--images", str(tmp / "frames"), "--out", str(tmp / "scene.ply"),
            "--report", args.out,
        ])
    return rc


if __name__ == "__main__":
    sys.exit(main())
