"""Procedural indoor scenes, ray-cast ground truth, and the on-disk dataset format.

World frame: y is up, the floor is y = 0.  Cameras follow the usual vision
convention (x right, y down, z forward) and poses are world-to-camera.
Depth is camera-space z, so back-projection is ``depth * K^-1 [u, v, 1]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.interpolate import CubicSpline

from .errors import ContractError, FormatError, SplatStreamError

FORMAT_VERSION = 1
DEPTH_MAGIC = b"DPTH"
CHECKER, NOISE = "checker", "noise"


class GenerationError(SplatStreamError):
    pass


@dataclass
class SceneSpec:
    seed: int
    room: tuple = (4.0, 3.0, 4.0)
    n_boxes: int | None = None  # None: drawn from 3..6
    n_frames: int = 100
    resolution: int = 64
    n_waypoints: int = 4
    min_overlap: float = 0.6

    def __post_init__(self):
        if self.n_frames < 60:
            raise ContractError("a scene trajectory needs at least 60 frames")
        self.room = tuple(float(r) for r in self.room)

    def to_dict(self):
        d = asdict(self)
        d["room"] = list(self.room)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Texture:
    kind: str
    color_a: np.ndarray
    color_b: np.ndarray
    period: float
    lattice: np.ndarray | None = None


@dataclass
class SceneGeometry:
    lo: np.ndarray
    hi: np.ndarray
    boxes: list  # [(lo, hi)]
    textures: list  # 6 walls, then one per box
    eyes: np.ndarray  # [T, 3]
    targets: np.ndarray  # [T, 3]
    spec: SceneSpec


@dataclass
class Frame:
    rgb: np.ndarray  # [H, W, 3] float in [0, 1]
    depth: np.ndarray | None = None  # [H, W] float32
    w2c: np.ndarray | None = None  # [4, 4]
    intrinsics: tuple | None = None  # (fx, fy, cx, cy, W, H)
    valid: np.ndarray | None = None


@dataclass
class SceneSample:
    frames: list
    spec: SceneSpec | None = None
    world_points: list = field(default_factory=list)  # generation-time only

    def __len__(self):
        return len(self.frames)

    def pointmaps(self, indices=None, ref: int | None = None):
        """Canonical pointmaps for ``indices`` in the camera frame of ``ref``."""
        indices = list(range(len(self.frames))) if indices is None else list(indices)
        ref = indices[0] if ref is None else ref
        return [build_pointmap(self.frames[i], self.frames[ref]) for i in indices]


# -- geometry ---------------------------------------------------------------


def _palette(rng):
    base = rng.uniform(0.15, 0.95, 3)
    other = np.clip(base * rng.uniform(0.3, 0.7) + rng.uniform(0.0, 0.3, 3), 0.0, 1.0)
    return base, other


def _texture(rng) -> Texture:
    a, b = _palette(rng)
    if rng.random() < 0.5:
        return Texture(CHECKER, a, b, float(rng.uniform(0.25, 0.6)))
    return Texture(NOISE, a, b, float(rng.uniform(0.2, 0.5)), rng.random((16, 16)))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = -R @ eye
    return m


def _inside_box(p, box, margin):
    lo, hi = box
    return np.all((p > lo - margin) & (p < hi + margin), axis=-1)


def _sample_free_point(rng, lo, hi, boxes, y_range, margin):
    for _ in range(200):
        p = np.array([rng.uniform(lo[0] + 0.6, hi[0] - 0.6), rng.uniform(*y_range), rng.uniform(lo[2] + 0.6, hi[2] - 0.6)])
        if not any(_inside_box(p, b, margin) for b in boxes):
            return p
    raise GenerationError("no free space for a waypoint")


def _trajectory(rng, spec, lo, hi, boxes):
    k = spec.n_waypoints
    way = np.stack([_sample_free_point(rng, lo, hi, boxes, (1.0, 1.9), 0.35) for _ in range(k)])
    # keep waypoints close together so adjacent frames overlap
    for i in range(1, k):
        step = way[i] - way[i - 1]
        n = np.linalg.norm(step)
        if n > 1.2:
            way[i] = way[i - 1] + step * (1.2 / n)
    tgt = np.stack([
        np.array([rng.uniform(lo[0], hi[0]), rng.uniform(0.3, 1.8), rng.uniform(lo[2], hi[2])]) for _ in range(k)
    ])
    s = np.linspace(0.0, 1.0, k)
    u = np.linspace(0.0, 1.0, spec.n_frames)
    eyes = CubicSpline(s, way, bc_type="natural")(u)
    targets = CubicSpline(s, tgt, bc_type="natural")(u)
    return eyes, targets


def _path_ok(eyes, targets, lo, hi, boxes):
    if np.any(eyes < lo + 0.2) or np.any(eyes > hi - 0.2):
        return False
    if any(_inside_box(eyes, b, 0.15).any() for b in boxes):
        return False
    view = targets - eyes
    dist = np.linalg.norm(view, axis=1)
    if np.any(dist < 0.6):
        return False
    # avoid degenerate look-at with a vertical view direction
    return bool(np.all(np.abs(view[:, 1]) / dist < 0.9))


def generate_scene(spec: SceneSpec) -> SceneGeometry:
    """Deterministic geometry and camera path for ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    w, h, d = spec.room
    lo = np.array([-w / 2, 0.0, -d / 2])
    hi = np.array([w / 2, h, d / 2])
    n_boxes = int(rng.integers(3, 7)) if spec.n_boxes is None else spec.n_boxes
    boxes = []
    for _ in range(n_boxes):
        size = np.array([rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.2), rng.uniform(0.3, 1.0)])
        cx = rng.uniform(lo[0] + size[0] / 2, hi[0] - size[0] / 2)
        cz = rng.uniform(lo[2] + size[2] / 2, hi[2] - size[2] / 2)
        blo = np.array([cx - size[0] / 2, 0.0, cz - size[2] / 2])
        boxes.append((blo, blo + size))
    textures = [_texture(rng) for _ in range(6 + n_boxes)]
    geom = SceneGeometry(lo, hi, boxes, textures, None, None, spec)
    for _ in range(100):
        try:
            eyes, targets = _trajectory(rng, spec, lo, hi, boxes)
        except GenerationError:
            continue
        if not _path_ok(eyes, targets, lo, hi, boxes):
            continue
        geom.eyes, geom.targets = eyes, targets
        if min_adjacent_overlap(geom) >= spec.min_overlap:
            return geom
    raise GenerationError(f"scene seed {spec.seed}: no trajectory met the overlap constraint after 100 tries")


def intrinsics_for(res: int):
    return (float(res), float(res), res / 2.0, res / 2.0, res, res)


def camera_pose(geom: SceneGeometry, i: int) -> np.ndarray:
    return look_at(geom.eyes[i], geom.targets[i])


def pixel_rays(w2c, intr):
    """Ray origin and per-pixel world directions scaled so that t = camera z."""
    fx, fy, cx, cy, W, H = intr
    j, i = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    d_cam = np.stack([(j - cx) / fx, (i - cy) / fy, np.ones_like(j)], axis=-1)
    R = w2c[:3, :3]
    origin = -R.T @ w2c[:3, 3]
    return origin, d_cam @ R


def _shade_texture(tex: Texture, uv):
    u, v = uv[:, 0] / tex.period, uv[:, 1] / tex.period
    if tex.kind == CHECKER:
        m = ((np.floor(u) + np.floor(v)) % 2)[:, None]
    else:
        n = tex.lattice.shape[0]
        iu, iv = np.floor(u), np.floor(v)
        fu, fv = u - iu, v - iv
        fu, fv = fu * fu * (3 - 2 * fu), fv * fv * (3 - 2 * fv)
        i0, j0 = iu.astype(int) % n, iv.astype(int) % n
        i1, j1 = (i0 + 1) % n, (j0 + 1) % n
        L = tex.lattice
        m = (L[i0, j0] * (1 - fu) * (1 - fv) + L[i1, j0] * fu * (1 - fv) + L[i0, j1] * (1 - fu) * fv + L[i1, j1] * fu * fv)[:, None]
    return tex.color_a * (1 - m) + tex.color_b * m


def raycast_frame(geom: SceneGeometry, w2c, intr):
    """Returns (rgb [H,W,3], depth [H,W], valid [H,W], world hit points [H,W,3])."""
    fx, fy, cx, cy, W, H = intr
    o, d = pixel_rays(w2c, intr)
    d = d.reshape(-1, 3)
    n = d.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        # room interior: nearest exit plane
        t_hi = (geom.hi - o) * inv
        t_lo = (geom.lo - o) * inv
        t_exit = np.where(d > 0, t_hi, np.where(d < 0, t_lo, np.inf))
        axis = np.argmin(t_exit, axis=1)
        t_best = t_exit[np.arange(n), axis]
        surf = np.where(np.take_along_axis(d, axis[:, None], 1)[:, 0] > 0, axis * 2 + 1, axis * 2)
        normal_axis = axis.copy()
        for b, (blo, bhi) in enumerate(geom.boxes):
            t1 = (blo - o) * inv
            t2 = (bhi - o) * inv
            tmin_ax = np.minimum(t1, t2)
            tmax = np.min(np.maximum(t1, t2), axis=1)
            enter_axis = np.argmax(tmin_ax, axis=1)
            tmin = tmin_ax[np.arange(n), enter_axis]
            hit = (tmax >= tmin) & (tmin > 1e-6) & (tmin < t_best)
            t_best = np.where(hit, tmin, t_best)
            surf = np.where(hit, 6 + b, surf)
            normal_axis = np.where(hit, enter_axis, normal_axis)
    valid = np.isfinite(t_best) & (t_best > 0)
    t_safe = np.where(valid, t_best, 0.0)
    pts = o + d * t_safe[:, None]
    rgb = np.zeros((n, 3))
    dn = d / np.linalg.norm(d, axis=1, keepdims=True)
    cos = np.abs(dn[np.arange(n), normal_axis])
    for s in np.unique(surf[valid]):
        sel = valid & (surf == s)
        ax = normal_axis[sel]
        others = np.array([[1, 2], [0, 2], [0, 1]])[ax]
        uv = np.take_along_axis(pts[sel], others, axis=1)
        rgb[sel] = _shade_texture(geom.textures[s], uv)
    rgb *= (0.25 + 0.75 * cos)[:, None]
    rgb = np.clip(rgb, 0.0, 1.0)
    return (
        rgb.reshape(H, W, 3),
        np.where(valid, t_best, 0.0).reshape(H, W),
        valid.reshape(H, W),
        pts.reshape(H, W, 3),
    )


def backproject(depth, intr) -> np.ndarray:
    """Camera-space points [H, W, 3] from z-depth."""
    fx, fy, cx, cy, W, H = intr
    j, i = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    z = np.asarray(depth, dtype=np.float64)
    return np.stack([(j - cx) / fx * z, (i - cy) / fy * z, z], axis=-1)


def build_pointmap(frame: Frame, ref: Frame) -> np.ndarray:
    """Pointmap of ``frame`` expressed in the camera coordinates of ``ref``."""
    xc = backproject(frame.depth, frame.intrinsics)
    rel = ref.w2c @ np.linalg.inv(frame.w2c)
    return xc @ rel[:3, :3].T + rel[:3, 3]


def covisibility(fa: Frame, fb: Frame, rel_tol: float = 0.02) -> float:
    """Fraction of ``fa``'s valid pixels that ``fb`` also sees (depth-tested)."""
    pts = build_pointmap(fa, fb)[fa.valid]
    fx, fy, cx, cy, W, H = fb.intrinsics
    z = pts[:, 2]
    front = z > 1e-6
    u = fx * pts[:, 0] / np.where(front, z, 1) + cx
    v = fy * pts[:, 1] / np.where(front, z, 1) + cy
    inside = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    ui = np.clip(u.astype(int), 0, W - 1)
    vi = np.clip(v.astype(int), 0, H - 1)
    d_b = fb.depth[vi, ui]
    seen = inside & fb.valid[vi, ui] & (np.abs(d_b - z) <= rel_tol * z + 0.05)
    return float(seen.mean()) if pts.shape[0] else 0.0


def render_frame(geom: SceneGeometry, i: int) -> tuple[Frame, np.ndarray]:
    intr = intrinsics_for(geom.spec.resolution)
    w2c = camera_pose(geom, i)
    rgb, depth, valid, world = raycast_frame(geom, w2c, intr)
    return Frame(rgb, depth.astype(np.float32), w2c, intr, valid), world


def min_adjacent_overlap(geom: SceneGeometry, res: int = 32) -> float:
    """Smallest co-visibility between consecutive frames (coarse-resolution check)."""
    intr = intrinsics_for(res)
    frames = []
    for i in range(len(geom.eyes)):
        w2c = camera_pose(geom, i)
        rgb, depth, valid, _ = raycast_frame(geom, w2c, intr)
        frames.append(Frame(rgb, depth, w2c, intr, valid))
    return min(covisibility(frames[i], frames[i + 1]) for i in range(len(frames) - 1))


def generate_sample(spec: SceneSpec) -> SceneSample:
    geom = generate_scene(spec)
    frames, worlds = [], []
    for i in range(spec.n_frames):
        f, w = render_frame(geom, i)
        frames.append(f)
        worlds.append(w)
    return SceneSample(frames, spec, worlds)


def quantize_rgb(rgb) -> np.ndarray:
    """Linear [0,1] -> uint8, clamped then rounded half-up."""
    return np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# -- dataset I/O --------------------------------------------------------------


def write_depth(path, depth):
    depth = np.ascontiguousarray(depth, dtype="<f4")
    h, w = depth.shape
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<III", w, h, 0) + depth.tobytes())


def read_depth(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError("depth header truncated", path=path, offset=len(buf))
    if buf[:4] != DEPTH_MAGIC:
        raise FormatError("bad depth magic", path=path, offset=0)
    w, h, reserved = struct.unpack_from("<III", buf, 4)
    if reserved != 0:
        raise FormatError("reserved depth field is not zero", path=path, offset=12)
    need = 16 + 4 * w * h
    if len(buf) != need:
        raise FormatError(f"depth payload expected {need} bytes, found {len(buf)}", path=path, offset=len(buf))
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w).copy()


def write_scene(sample: SceneSample, scene_dir):
    scene_dir = Path(scene_dir)
    (scene_dir / "frames").mkdir(parents=True, exist_ok=True)
    (scene_dir / "depth").mkdir(parents=True, exist_ok=True)
    cams = []
    for i, f in enumerate(sample.frames):
        Image.fromarray(quantize_rgb(f.rgb)).save(scene_dir / "frames" / f"{i:05d}.png")
        write_depth(scene_dir / "depth" / f"{i:05d}.f32", f.depth)
        fx, fy, cx, cy, W, H = f.intrinsics
        cams.append({"w2c": [float(v) for v in np.asarray(f.w2c).reshape(-1)], "fx": fx, "fy": fy, "cx": cx, "cy": cy, "width": W, "height": H})
    (scene_dir / "cameras.json").write_text(json.dumps({"format_version": FORMAT_VERSION, "frames": cams}, indent=1))
    spec = sample.spec.to_dict() if sample.spec is not None else {}
    (scene_dir / "spec.json").write_text(json.dumps(spec, indent=1, sort_keys=True))


def write_dataset(samples, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(samples):
        write_scene(s, out_dir / f"scene_{k:04d}")


def load_scene(scene_dir) -> SceneSample:
    scene_dir = Path(scene_dir)
    cam_path = scene_dir / "cameras.json"
    if not cam_path.exists():
        raise FormatError("missing cameras.json", path=cam_path)
    try:
        cams = json.loads(cam_path.read_text())["frames"]
    except (json.JSONDecodeError, KeyError) as e:
        raise FormatError(f"unreadable cameras.json ({e})", path=cam_path) from e
    spec_path = scene_dir / "spec.json"
    spec = SceneSpec.from_dict(json.loads(spec_path.read_text())) if spec_path.exists() else None
    frames = []
    for i, c in enumerate(cams):
        png = scene_dir / "frames" / f"{i:05d}.png"
        if not png.exists():
            raise FormatError("missing frame image", path=png)
        try:
            rgb = np.asarray(Image.open(png).convert("RGB"), dtype=np.float32) / 255.0
        except OSError as e:
            raise FormatError(f"unreadable PNG ({e})", path=png) from e
        depth = read_depth(scene_dir / "depth" / f"{i:05d}.f32")
        intr = (c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"])
        w2c = np.asarray(c["w2c"], dtype=np.float64).reshape(4, 4)
        frames.append(Frame(rgb, depth, w2c, intr, depth > 0))
    return SceneSample(frames, spec)


def scene_dirs(root):
    return sorted(p for p in Path(root).iterdir() if p.is_dir() and p.name.startswith("scene_"))


def load_dataset(root) -> list:
    return [load_scene(d) for d in scene_dirs(root)]


def reprojection_error(frame: Frame, ref: Frame) -> float:
    """Max pixel error after mapping the canonical pointmap back into ``frame``."""
    X = build_pointmap(frame, ref)
    back = np.linalg.inv(ref.w2c @ np.linalg.inv(frame.w2c))
    xc = X @ back[:3, :3].T + back[:3, 3]
    fx, fy, cx, cy, W, H = frame.intrinsics
    j, i = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    m = frame.valid
    u = fx * xc[..., 0] / xc[..., 2] + cx
    v = fy * xc[..., 1] / xc[..., 2] + cy
    return float(max(np.abs(u - j)[m].max(initial=0.0), np.abs(v - i)[m].max(initial=0.0)))


def make_specs(n_scenes, n_frames=100, res=64, seed=0):
    """Scene specs with seeds derived from one master seed."""
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n_scenes)]
    return [SceneSpec(seed=s, n_frames=n_frames, resolution=res) for s in seeds]
