"""Novel-view evaluation protocol on synthetic scenes."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .gaussians import prune
from .losses import scale_factor
from .metrics import EvalReport
from .pipeline import Model, Session, scaled_camera
from .rasterizer import rasterize
from .synthscene import SceneSample, build_pointmap
from .tensor import Tensor

# (n_views, interval) pairs used by the benchmark protocol
PROTOCOLS = {2: 5, 10: 3, 50: 2}


def input_indices(n_views, interval, start=0):
    return [start + interval * k for k in range(n_views)]


def novel_indices(inputs):
    return [i for a, b in zip(inputs, inputs[1:]) for i in range(a + 1, b)]


def prediction_scale(session: Session, scene: SceneSample, inputs) -> float:
    """Ratio z_pred / z_gt between predicted and true input pointmaps."""
    valid = np.stack([scene.frames[i].valid for i in inputs])
    pred = np.stack([e.xyz.data for e in sorted(session.emissions, key=lambda e: e.frame)])
    z_pred = float(scale_factor(Tensor(pred, dtype=np.float64), valid).data)
    return z_pred / gt_scale(scene, inputs)


def gt_scale(scene: SceneSample, inputs) -> float:
    ref = scene.frames[inputs[0]]
    gt = np.stack([build_pointmap(scene.frames[i], ref) for i in inputs])
    valid = np.stack([scene.frames[i].valid for i in inputs])
    return float(scale_factor(Tensor(gt, dtype=np.float64), valid).data)


def poses_json(scene: SceneSample, inputs, targets) -> dict:
    """POSES.json for ``reconstruct --render-views``: target cameras relative to the first input."""
    ref_inv = np.linalg.inv(scene.frames[inputs[0]].w2c)
    fx, fy, cx, cy, w, h = scene.frames[inputs[0]].intrinsics
    views = [{"name": f"{i:05d}", "w2c": (scene.frames[i].w2c @ ref_inv).reshape(-1).tolist()} for i in targets]
    return {
        "intrinsics": {"fx": fx, "fy": fy, "cx": cx, "cy": cy, "width": w, "height": h},
        "z_gt": gt_scale(scene, inputs),
        "views": views,
    }


def write_poses(scene: SceneSample, inputs, targets, path):
    Path(path).write_text(json.dumps(poses_json(scene, inputs, targets), indent=1))


def evaluate_scene(model: Model, scene: SceneSample, n_views=10, interval=3, start=0, conf_thresholds=(None,), mem_cfg=None):
    """Reconstruct from the input views and score every in-between frame.

    ``conf_thresholds`` entries: None = no pruning, "mean" = mean confidence,
    or a number.  Returns one EvalReport per entry.
    """
    inputs = input_indices(n_views, interval, start)
    if inputs[-1] >= len(scene):
        raise ValueError(f"scene has {len(scene)} frames, protocol needs {inputs[-1] + 1}")
    targets = novel_indices(inputs)
    t0 = time.perf_counter()
    session = Session(model, mem_cfg)
    session.run([scene.frames[i].rgb for i in inputs])
    wall = time.perf_counter() - t0
    field = session.global_field
    scale = prediction_scale(session, scene, inputs)
    ref_inv = np.linalg.inv(scene.frames[inputs[0]].w2c)
    reports = []
    for th in conf_thresholds:
        if th is None:
            f, th_val = field, None
        else:
            th_val = float(field.confidence.mean()) if th == "mean" else float(th)
            f = prune(field, th_val)
        rep = EvalReport(
            wall_time_s=wall, fps=len(inputs) / wall, n_frames=len(inputs),
            gaussians_pre_prune=len(field), gaussians_post_prune=len(f), conf_threshold=th_val,
        )
        for i in targets:
            fr = scene.frames[i]
            cam = scaled_camera(fr.w2c @ ref_inv, fr.intrinsics, scale)
            out = rasterize(f, cam)
            rep.add(f"{i:05d}", np.clip(out.rgb, 0.0, 1.0), fr.rgb)
        reports.append(rep)
    return reports
