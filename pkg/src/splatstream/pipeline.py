"""Streaming reconstruction session and the training loop."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .backbone import Backbone, BackboneConfig, FeatureMap, Module
from .errors import ContractError, NumericError, StateError
from .gaussians import GaussianField, GaussianParams, accumulate, activate, activate_tensors
from .losses import LossReport, conf_loss, masked_mse, regr_loss, scale_factor, total_loss
from .memory import MemoryBank, MemoryConfig, MemoryNet
from .rasterizer import Camera, render
from .synthscene import SceneSample, build_pointmap
from .tensor import Tensor


class SamplingError(ContractError):
    pass


# -- model ------------------------------------------------------------------------


class Model(Module):
    """Backbone plus the memory projections; one checkpoint holds both."""

    def __init__(self, cfg: BackboneConfig | None = None, memory_depth: int = 2):
        self.cfg = cfg or BackboneConfig()
        self.backbone = Backbone(self.cfg)
        rng = np.random.default_rng(self.cfg.seed + 1)
        self.memnet = MemoryNet(rng, self.cfg.dim_key, self.cfg.dim_dec, self.cfg.dim_enc, memory_depth)

    @property
    def memory_depth(self):
        return self.memnet.depth

    def n_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def save(self, path):
        state = {f"meta.{k}": np.array([v], dtype=np.float32) for k, v in self.cfg.to_dict().items()}
        state["meta.memory_depth"] = np.array([self.memory_depth], dtype=np.float32)
        state.update(self.state_dict())
        tn.save_checkpoint(path, state)

    @classmethod
    def load(cls, path) -> "Model":
        state = tn.load_checkpoint(path)
        meta = {k[5:]: v for k, v in state.items() if k.startswith("meta.")}
        names = {f.name for f in fields(BackboneConfig)}
        missing = names - set(meta)
        if missing:
            raise ContractError(f"checkpoint lacks model config entries: {sorted(missing)}")
        cfg = BackboneConfig(**{k: int(round(float(meta[k][0]))) for k in names})
        model = cls(cfg, memory_depth=int(round(float(meta.get("memory_depth", [2])[0]))))
        model.load_state_dict({k: v for k, v in state.items() if not k.startswith("meta.")})
        return model


def prepare_image(image: np.ndarray) -> np.ndarray:
    """uint8 or [0,1] float image -> network input in [-1, 1]."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    return img * 2.0 - 1.0


# -- session ------------------------------------------------------------------------


@dataclass
class Emission:
    frame: int  # 0-based position in the fed sequence
    xyz: Tensor
    conf: Tensor
    params: GaussianParams
    field: GaussianField | None = None


class Session:
    """bootstrap -> step* -> flush over an ordered image stream.

    Frames are numbered from 0 in feed order.  ``frame_counter`` counts the
    frames received so far, so each ``step`` emits frame ``frame_counter - 2``
    (0-based), i.e. the previous frame.  With ``track_grad`` the emissions keep
    their tape history for training; otherwise everything runs under no_grad.
    """

    def __init__(self, model: Model, mem_cfg: MemoryConfig | None = None, track_grad: bool = False, build_field: bool = True):
        self.model = model
        self.bank = MemoryBank(mem_cfg, tokens_per_frame=model.cfg.n_tokens)
        self.track_grad = track_grad
        self.build_field = build_field
        self.prev_query: FeatureMap | None = None
        self.prev_encoded: FeatureMap | None = None
        self.frame_counter = 0
        self.global_field = GaussianField.empty(model.cfg.sh_degree, canonical_frame=0)
        self.emissions: list[Emission] = []
        self.status = "fresh"

    def _ctx(self):
        import contextlib

        return contextlib.nullcontext() if self.track_grad else tn.no_grad()

    def _encode(self, image, frame):
        return self.model.backbone.encode_image(prepare_image(image), frame=frame)

    def _emit(self, f_h: FeatureMap, frame: int) -> Emission:
        bb = self.model.backbone
        xyz, conf = bb.out_head(f_h)
        raw = bb.gaussian_head(f_h)
        params = activate_tensors(raw, xyz, conf, bb.cfg.sh_degree, frame=frame)
        em = Emission(frame, xyz, conf, params)
        if self.build_field:
            em.field = activate(raw, xyz, conf, bb.cfg.sh_degree, frame=frame, canonical_frame=0)
            self.global_field = accumulate(self.global_field, em.field)
        self.emissions.append(em)
        return em

    def _insert(self, f_q: FeatureMap, f_h: FeatureMap, frame: int):
        mn = self.model.memnet
        self.bank.insert(mn.make_key(f_q), mn.make_value(f_h), frame)

    def bootstrap(self, image_1, image_2) -> Emission:
        if self.status != "fresh":
            raise StateError("bootstrap called on a session that already started")
        bb = self.model.backbone
        with self._ctx():
            f1 = self._encode(image_1, 0)
            f2 = self._encode(image_2, 1)
            g1 = bb.bootstrap_fused(f1)
            h2p, h1 = bb.decode_pair(f2, g1)
            em = self._emit(h1, 0)
            self._insert(bb.query_head(h1, f1), h1, 0)
            self.prev_query = bb.query_head(h2p, f2)
            self.prev_encoded = f2
        self.frame_counter = 2
        self.status = "open"
        return em

    def step(self, image) -> Emission:
        if self.status == "fresh":
            raise StateError("step called before bootstrap")
        if self.status == "closed":
            raise StateError("step called on a closed session")
        bb = self.model.backbone
        t = self.frame_counter
        with self._ctx():
            ft = self._encode(image, t)
            g_prev = self.model.memnet.query(self.prev_query, self.bank)
            htp, h_prev = bb.decode_pair(ft, g_prev)
            em = self._emit(h_prev, t - 1)
            self._insert(self.prev_query, h_prev, t - 1)
            self.prev_query = bb.query_head(htp, ft)
            self.prev_encoded = ft
        self.frame_counter += 1
        return em

    def flush(self) -> Emission:
        if self.status == "fresh":
            raise StateError("flush called before bootstrap")
        if self.status == "closed":
            raise StateError("session already flushed")
        bb = self.model.backbone
        last = self.frame_counter - 1
        with self._ctx():
            g_last = self.model.memnet.query(self.prev_query, self.bank)
            _, h_last = bb.decode_pair(self.prev_encoded, g_last)
            em = self._emit(h_last, last)
        self.status = "closed"
        return em

    def run(self, images) -> GaussianField:
        images = list(images)
        if len(images) < 2:
            raise ContractError("sequence of >= 2 frames required")
        self.bootstrap(images[0], images[1])
        for img in images[2:]:
            self.step(img)
        self.flush()
        return self.global_field


def reconstruct_sequence(model: Model, images, mem_cfg: MemoryConfig | None = None) -> Session:
    s = Session(model, mem_cfg)
    s.run(images)
    return s


# -- training -----------------------------------------------------------------------


@dataclass
class TrainConfig:
    n_train: int = 5
    n_extra: int = 2
    t_min: int = 5
    t_max: int = 10
    th_alpha: float = 1e-3
    lam: float = 0.1
    alpha: float = 0.4
    lr: float = 1e-4
    weight_decay: float = 0.05
    batch: int = 4
    steps: int = 1000
    seed: int = 0
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 500
    log_every: int = 1
    t_stop: float = 1e-4  # renderer early stop used in training only
    alpha_skip: float = 1.0 / 255.0  # 0 only for smooth gradient checks

    def __post_init__(self):
        if self.t_min > self.t_max:
            raise ContractError("t_min must not exceed t_max")
        if self.n_train < 2:
            raise ContractError("n_train must be at least 2")
        for name in ("th_alpha", "lam", "lr", "weight_decay", "n_extra", "t_min"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if self.alpha <= 0:
            raise ContractError("alpha must be positive")
        if self.n_extra > self.t_min - 1:
            raise ContractError("n_extra must fit strictly inside the smallest gap")

    @classmethod
    def from_json(cls, path_or_dict) -> "TrainConfig":
        d = path_or_dict if isinstance(path_or_dict, dict) else json.loads(Path(path_or_dict).read_text())
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainClip:
    input_idx: list
    extra_idx: list
    images: list  # rgb [H,W,3] of input frames
    pointmaps: np.ndarray  # [N,H,W,3] canonical (first input) frame
    valid: np.ndarray  # [N,H,W]
    view_idx: list  # input then extra indices
    view_rgb: list
    view_w2c: list  # relative to the first input camera
    intrinsics: tuple = field(default=None)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.input_idx, self.input_idx[1:])):
            raise ContractError("input frame indices must be strictly increasing")
        for e in self.extra_idx:
            k = np.searchsorted(self.input_idx, e)
            if k == 0 or k == len(self.input_idx) or self.input_idx[k - 1] == e:
                raise ContractError(f"extra frame {e} is not strictly between two inputs")


def sample_indices(n_total: int, cfg: TrainConfig, rng):
    if n_total < cfg.n_train * cfg.t_max:
        raise SamplingError(f"scene has {n_total} frames, clip needs {cfg.n_train * cfg.t_max}")
    gaps = rng.integers(cfg.t_min, cfg.t_max + 1, size=cfg.n_train - 1)
    span = int(gaps.sum())
    start = int(rng.integers(0, n_total - span))
    idx = [start] + list(start + np.cumsum(gaps))
    extras = []
    for a, b in zip(idx, idx[1:]):
        inner = np.arange(a + 1, b)
        extras += sorted(int(x) for x in rng.choice(inner, size=cfg.n_extra, replace=False))
    return [int(i) for i in idx], extras


def sample_clip(scene: SceneSample, cfg: TrainConfig, rng) -> TrainClip:
    idx, extras = sample_indices(len(scene), cfg, rng)
    return clip_from_indices(scene, idx, extras)


def clip_from_indices(scene: SceneSample, idx, extras) -> TrainClip:
    ref = scene.frames[idx[0]]
    pms = np.stack([build_pointmap(scene.frames[i], ref) for i in idx])
    valid = np.stack([scene.frames[i].valid for i in idx])
    views = list(idx) + list(extras)
    ref_inv = np.linalg.inv(ref.w2c)
    return TrainClip(
        input_idx=list(idx),
        extra_idx=list(extras),
        images=[scene.frames[i].rgb for i in idx],
        pointmaps=pms,
        valid=valid,
        view_idx=views,
        view_rgb=[scene.frames[i].rgb for i in views],
        view_w2c=[scene.frames[i].w2c @ ref_inv for i in views],
        intrinsics=ref.intrinsics,
    )


def concat_params(ps) -> GaussianParams:
    if len(ps) == 1:
        return ps[0]
    return GaussianParams(
        mu=tn.concat([p.mu for p in ps], 0),
        log_scale=tn.concat([p.log_scale for p in ps], 0),
        rot=tn.concat([p.rot for p in ps], 0),
        opacity=tn.concat([p.opacity for p in ps], 0),
        sh=tn.concat([p.sh for p in ps], 0),
        confidence=tn.concat([p.confidence for p in ps], 0),
        source_frame=np.concatenate([p.source_frame for p in ps]),
    )


def scaled_camera(w2c_rel, intr, scale: float) -> Camera:
    """GT relative camera with its translation brought to the prediction's scale."""
    m = np.array(w2c_rel, dtype=np.float64)
    m[:3, 3] *= scale
    fx, fy, cx, cy, w, h = intr
    return Camera.from_w2c(m, fx, fy, cx, cy, int(w), int(h))


def clip_forward(model: Model, clip: TrainClip, cfg: TrainConfig, mem_cfg: MemoryConfig | None = None, pin=None):
    """Differentiable forward of one clip; returns (total, LossReport).

    The camera translation scale z_pred / z_gt is treated as a constant.
    ``pin`` (a dict) records that scale and each view's depth order on the
    first call and replays them on later calls, so finite-difference checks
    stay on one smooth piece of the loss.
    """
    stage = "forward"
    try:
        s = Session(model, mem_cfg, track_grad=True, build_field=False)
        imgs = clip.images
        s.bootstrap(imgs[0], imgs[1])
        for img in imgs[2:]:
            s.step(img)
        s.flush()
        ems = sorted(s.emissions, key=lambda e: e.frame)
        xyz = tn.stack([e.xyz for e in ems], 0)
        conf = tn.stack([e.conf for e in ems], 0)

        stage = "l_conf"
        z_gt = float(scale_factor(Tensor(clip.pointmaps), clip.valid).data)
        z_pred = scale_factor(xyz, clip.valid)
        l_regr = regr_loss(Tensor(clip.pointmaps, dtype=xyz.dtype), xyz, clip.valid, z_gt=z_gt, z_pred=z_pred)
        l_conf = conf_loss(l_regr, conf, clip.valid, cfg.alpha)

        stage = "l_mmse"
        params = concat_params([e.params for e in ems])
        replay = pin is not None and "scale" in pin
        if replay:
            scale = pin["scale"]
        else:
            scale = float(z_pred.data) / z_gt
            if pin is not None:
                pin["scale"], pin["orders"] = scale, []
        l_mmse = None
        fracs = []
        for v, (rgb_gt, w2c) in enumerate(zip(clip.view_rgb, clip.view_w2c)):
            cam = scaled_camera(w2c, clip.intrinsics, scale)
            order = pin["orders"][v] if replay else None
            rec = pin["orders"] if pin is not None and not replay else None
            rgb, alpha = render(params, cam, t_stop=cfg.t_stop, alpha_min=cfg.alpha_skip, order=order, pin=rec)
            l_v, frac = masked_mse(rgb_gt, rgb, alpha, cfg.th_alpha)
            fracs.append(frac)
            l_mmse = l_v if l_mmse is None else l_mmse + l_v
        l_mmse = l_mmse * (1.0 / len(clip.view_rgb))

        stage = "total"
        total = total_loss(l_conf, l_mmse, cfg.lam)
    except NumericError as e:
        raise NumericError(f"non-finite value in {stage}: {e}") from e
    rep = LossReport(
        l_conf=float(l_conf.data), l_mmse=float(l_mmse.data), total=float(total.data),
        z_pred=float(z_pred.data), z_gt=z_gt, masked_fraction=float(np.mean(fracs)),
        l_regr=float(l_regr.data[clip.valid].mean()), render_scale=scale,
    )
    return total, rep


class AdamW:
    """Adam moments with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.data.ndim >= 2:
                upd = upd + self.wd * p.data
            p.data = (p.data - self.lr * upd).astype(p.dtype)


def clip_grad_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None)))
    if max_norm and total > max_norm:
        f = max_norm / (total + 1e-12)
        grads = [None if g is None else g * f for g in grads]
    return grads, total


def train_step(model: Model, clips, cfg: TrainConfig, opt: AdamW, mem_cfg: MemoryConfig | None = None) -> LossReport:
    """Forward/backward over a batch of clips, then one clipped AdamW update."""
    if isinstance(clips, TrainClip):
        clips = [clips]
    params = opt.params
    acc = [np.zeros(p.shape, dtype=np.float64) for p in params]
    reps = []
    tape = tn.get_tape()
    for clip in clips:
        model.zero_grad()
        tape.reset()
        try:
            total, rep = clip_forward(model, clip, cfg, mem_cfg)
            tn.backprop(total)
        finally:
            tape.reset()
        for a, p in zip(acc, params):
            if p.grad is not None:
                a += p.grad
        reps.append(rep)
    grads = [a / len(clips) for a in acc]
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericError("non-finite gradient; step aborted")
    grads, gnorm = clip_grad_norm(grads, cfg.grad_clip)
    opt.step(grads)
    model.zero_grad()
    mean = {k: float(np.mean([getattr(r, k) for r in reps])) for k in asdict(reps[0])}
    out = LossReport(**mean)
    out.grad_norm = gnorm
    return out


def make_optimizer(model: Model, cfg: TrainConfig) -> AdamW:
    return AdamW(model.parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)


class Trainer:
    """Samples clips from a scene list, steps the optimizer, logs and checkpoints."""

    def __init__(self, model: Model, scenes, cfg: TrainConfig, out_dir=None, mem_cfg=None, log_fh=None):
        self.model, self.scenes, self.cfg = model, list(scenes), cfg
        self.mem_cfg = mem_cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = make_optimizer(model, cfg)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log_fh = log_fh
        self.history: list[LossReport] = []
        usable = [s for s in self.scenes if len(s) >= cfg.n_train * cfg.t_max]
        if not usable:
            raise SamplingError("no scene is long enough for the clip configuration")
        self.scenes = usable

    def next_batch(self):
        clips = []
        for _ in range(self.cfg.batch):
            scene = self.scenes[int(self.rng.integers(len(self.scenes)))]
            clips.append(sample_clip(scene, self.cfg, self.rng))
        return clips

    def save(self, step):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.model.save(self.out_dir / f"step_{step:06d}.ckpt")
        self.model.save(self.out_dir / "latest.ckpt")

    def run(self, steps=None, fixed_clips=None):
        steps = self.cfg.steps if steps is None else steps
        for step in range(1, steps + 1):
            t0 = time.perf_counter()
            clips = fixed_clips if fixed_clips is not None else self.next_batch()
            rep = train_step(self.model, clips, self.cfg, self.opt, self.mem_cfg)
            ms = (time.perf_counter() - t0) * 1000.0
            self.history.append(rep)
            if self.log_fh is not None and step % self.cfg.log_every == 0:
                self.log_fh.write(rep.to_json(step, step_ms=round(ms, 2), grad_norm=rep.grad_norm) + "\n")
                self.log_fh.flush()
            if self.cfg.checkpoint_every and step % self.cfg.checkpoint_every == 0:
                self.save(step)
        if self.out_dir is not None and (not self.cfg.checkpoint_every or steps % self.cfg.checkpoint_every):
            self.save(steps)
        return self.history
