"""Gaussian primitives: activation, pruning, accumulation, SH colour, PLY I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import tensor as tn
from .errors import ContractError, FormatError, NumericError
from .tensor import Tensor

SCALE_MIN = 1e-4
SCALE_MAX = 0.5
LOG_SCALE_MIN = float(np.log(SCALE_MIN))
LOG_SCALE_MAX = float(np.log(SCALE_MAX))

# real SH constants, graphics sign convention (odd m negated)
C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values [N, (d+1)^2] for direction rows ``dirs`` [N, 3]."""
    if not 0 <= degree <= 3:
        raise ContractError(f"SH degree must be 0..3, got {degree}")
    dirs = np.atleast_2d(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [np.full_like(x, C0)]
    if degree >= 1:
        cols += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]
    if degree >= 3:
        cols += [
            C3[0] * y * (3 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(cols, axis=1)


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(x, y, z) as [N, (d+1)^2, 3], components treated as independent."""
    dirs = np.atleast_2d(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    o = np.zeros_like(x)
    rows = [(o, o, o)]
    if degree >= 1:
        rows += [(o, -C1 + o, o), (o, o, C1 + o), (-C1 + o, o, o)]
    if degree >= 2:
        rows += [
            (C2[0] * y, C2[0] * x, o),
            (o, C2[1] * z, C2[1] * y),
            (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
            (C2[3] * z, o, C2[3] * x),
            (2 * C2[4] * x, -2 * C2[4] * y, o),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (6 * C3[0] * x * y, C3[0] * (3 * xx - 3 * yy), o),
            (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
            (-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy), 8 * C3[2] * y * z),
            (-6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y, 8 * C3[4] * x * z),
            (2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)),
            (C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, o),
        ]
    return np.stack([np.stack(r, axis=1) for r in rows], axis=1)


def sh_eval(sh: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """RGB from coefficients [3, K] (or [N, 3, K]) along unit direction(s).

    Adds the +0.5 offset and clamps at zero.
    """
    sh = np.asarray(sh, dtype=np.float64)
    single = sh.ndim == 2
    sh = sh[None] if single else sh
    k = sh.shape[-1]
    degree = int(round(np.sqrt(k))) - 1
    if degree > 3 or n_coeffs(degree) != k:
        raise ContractError(f"unsupported SH coefficient count {k}")
    d = np.atleast_2d(np.asarray(direction, dtype=np.float64))
    if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-4):
        raise ContractError("SH direction must be a unit vector")
    basis = sh_basis(d, degree)
    rgb = np.maximum(np.einsum("nck,nk->nc", sh, np.broadcast_to(basis, (sh.shape[0], k))) + 0.5, 0.0)
    return rgb[0] if single else rgb


@dataclass
class GaussianPrimitive:
    mu: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    opacity: float
    sh: np.ndarray
    confidence: float
    source_frame: int

    @property
    def covariance(self) -> np.ndarray:
        r = quat_to_rotmat(self.rot[None])[0]
        return r @ np.diag(np.exp(2 * self.log_scale.astype(np.float64))) @ r.T


@dataclass
class GaussianField:
    """Struct-of-arrays set of primitives in one canonical frame.

    The opacity logit is stored, the activated opacity derived, so PLY
    round trips are exact.
    """

    mu: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    confidence: np.ndarray
    source_frame: np.ndarray
    canonical_frame: int = 0
    sh_degree: int = 1

    def __post_init__(self):
        f32 = np.float32
        self.mu = np.asarray(self.mu, dtype=f32).reshape(-1, 3)
        self.log_scale = np.asarray(self.log_scale, dtype=f32).reshape(-1, 3)
        self.rot = np.asarray(self.rot, dtype=f32).reshape(-1, 4)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=f32).reshape(-1)
        self.sh = np.asarray(self.sh, dtype=f32).reshape(-1, 3, n_coeffs(self.sh_degree))
        self.confidence = np.asarray(self.confidence, dtype=f32).reshape(-1)
        self.source_frame = np.asarray(self.source_frame, dtype=np.int64).reshape(-1)

    @classmethod
    def empty(cls, sh_degree=1, canonical_frame=0):
        k = n_coeffs(sh_degree)
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
            np.zeros((0, 3, k)), np.zeros(0), np.zeros(0, dtype=np.int64),
            canonical_frame=canonical_frame, sh_degree=sh_degree,
        )

    def __len__(self):
        return int(self.mu.shape[0])

    @property
    def opacity(self) -> np.ndarray:
        return expit(self.opacity_logit.astype(np.float64))

    def __getitem__(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.mu[i], self.log_scale[i], self.rot[i], float(self.opacity[i]),
            self.sh[i], float(self.confidence[i]), int(self.source_frame[i]),
        )

    def subset(self, keep) -> "GaussianField":
        return GaussianField(
            self.mu[keep], self.log_scale[keep], self.rot[keep], self.opacity_logit[keep],
            self.sh[keep], self.confidence[keep], self.source_frame[keep],
            canonical_frame=self.canonical_frame, sh_degree=self.sh_degree,
        )

    def equals(self, other: "GaussianField") -> bool:
        """Bitwise equality of every stored array and the metadata."""
        names = ("mu", "log_scale", "rot", "opacity_logit", "sh", "confidence", "source_frame")
        return (
            self.canonical_frame == other.canonical_frame
            and self.sh_degree == other.sh_degree
            and all(
                getattr(self, n).shape == getattr(other, n).shape
                and getattr(self, n).tobytes() == getattr(other, n).tobytes()
                for n in names
            )
        )


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (w, x, y, z) [N, 4] -> rotation matrices [N, 3, 3]."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )


def normalize_quats(q: np.ndarray):
    """Returns (unit quaternions, norms); zero-norm rows become identity."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1)
    out = np.zeros_like(q)
    big = np.abs(q).max(axis=-1)
    ok = big > 0
    s = q[ok] / big[ok, None]  # pre-scale so tiny quaternions do not underflow
    out[ok] = s / np.linalg.norm(s, axis=-1, keepdims=True)
    out[~ok] = (1.0, 0.0, 0.0, 0.0)
    return out, n


@dataclass
class GaussianParams:
    """Tensor-valued primitive parameters, flattened to [N, ...], for training."""

    mu: Tensor
    log_scale: Tensor
    rot: Tensor  # raw quaternion; the rasterizer normalizes
    opacity: Tensor
    sh: Tensor
    confidence: Tensor
    source_frame: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return self.mu.shape[0]


def activate_tensors(raw: Tensor, pointmap: Tensor, confidence: Tensor, sh_degree: int, frame: int = 0) -> GaussianParams:
    """Map raw head channels [H, W, C] to primitive parameters (differentiable)."""
    h, w, c = raw.shape
    k = n_coeffs(sh_degree)
    if c != 8 + 3 * k:
        raise ContractError(f"raw Gaussian channels {c} do not match SH degree {sh_degree}")
    if pointmap.shape != (h, w, 3) or confidence.shape != (h, w):
        raise ContractError("pointmap/confidence shapes disagree with the raw Gaussian map")
    bad = ~np.isfinite(raw.data)
    if bad.any():
        i, j = np.argwhere(bad.any(axis=-1))[0]
        raise NumericError(f"non-finite raw Gaussian value at pixel ({i}, {j})")
    flat = raw.reshape(h * w, c)
    return GaussianParams(
        mu=pointmap.reshape(h * w, 3),
        log_scale=tn.clamp(flat[:, 0:3], LOG_SCALE_MIN, LOG_SCALE_MAX),
        rot=flat[:, 3:7],
        opacity=tn.sigmoid(flat[:, 7]),
        sh=flat[:, 8:].reshape(h * w, 3, k),
        confidence=confidence.reshape(h * w),
        source_frame=np.full(h * w, frame, dtype=np.int64),
    )


def activate(raw, pointmap, confidence, sh_degree: int = 1, frame: int = 0, canonical_frame: int = 0) -> GaussianField:
    """Numpy-facing activation producing an immutable field of H*W primitives."""
    raw = np.asarray(raw.data if isinstance(raw, Tensor) else raw, dtype=np.float64)
    pointmap = np.asarray(pointmap.data if isinstance(pointmap, Tensor) else pointmap)
    confidence = np.asarray(confidence.data if isinstance(confidence, Tensor) else confidence)
    h, w, c = raw.shape
    bad = ~np.isfinite(raw)
    if bad.any():
        i, j = np.argwhere(bad.any(axis=-1))[0]
        raise NumericError(f"non-finite raw Gaussian value at pixel ({i}, {j})")
    k = n_coeffs(sh_degree)
    if c != 8 + 3 * k:
        raise ContractError(f"raw Gaussian channels {c} do not match SH degree {sh_degree}")
    flat = raw.reshape(h * w, c)
    rot, _ = normalize_quats(flat[:, 3:7])
    return GaussianField(
        mu=pointmap.reshape(-1, 3),
        log_scale=np.clip(flat[:, 0:3], LOG_SCALE_MIN, LOG_SCALE_MAX),
        rot=rot,
        opacity_logit=flat[:, 7],
        sh=flat[:, 8:].reshape(-1, 3, k),
        confidence=confidence.reshape(-1),
        source_frame=np.full(h * w, frame),
        canonical_frame=canonical_frame,
        sh_degree=sh_degree,
    )


def params_to_field(p: GaussianParams, canonical_frame=0, sh_degree=1) -> GaussianField:
    rot, _ = normalize_quats(p.rot.data)
    op = np.clip(p.opacity.data.astype(np.float64), 1e-12, 1 - 1e-7)
    return GaussianField(
        p.mu.data, p.log_scale.data, rot, np.log(op) - np.log1p(-op), p.sh.data,
        p.confidence.data, p.source_frame, canonical_frame=canonical_frame, sh_degree=sh_degree,
    )


def prune(field_: GaussianField, th_conf: float) -> GaussianField:
    if th_conf < 0:
        raise ContractError(f"confidence threshold must be >= 0, got {th_conf}")
    return field_.subset(field_.confidence >= th_conf)


def accumulate(global_field: GaussianField, theta_t: GaussianField) -> GaussianField:
    if len(global_field) and len(theta_t) and global_field.canonical_frame != theta_t.canonical_frame:
        raise ContractError(
            f"canonical frame mismatch: {global_field.canonical_frame} vs {theta_t.canonical_frame}"
        )
    if global_field.sh_degree != theta_t.sh_degree:
        raise ContractError("SH degree mismatch in accumulate")
    cat = lambda a, b: np.concatenate([a, b], axis=0)  # noqa: E731
    g, t = global_field, theta_t
    return GaussianField(
        cat(g.mu, t.mu), cat(g.log_scale, t.log_scale), cat(g.rot, t.rot),
        cat(g.opacity_logit, t.opacity_logit), cat(g.sh, t.sh), cat(g.confidence, t.confidence),
        cat(g.source_frame, t.source_frame),
        canonical_frame=g.canonical_frame if len(g) else t.canonical_frame, sh_degree=g.sh_degree,
    )


# -- PLY ------------------------------------------------------------------------


def ply_property_names(sh_degree: int) -> list[str]:
    k = n_coeffs(sh_degree)
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def export_ply(field_: GaussianField, path, sidecar: bool = True):
    """Binary little-endian PLY in the usual splatting-tool layout.

    A ``<path>.json`` sidecar carries metadata plus confidence and source
    frame, which have no slot in the vertex layout.
    """
    names = ply_property_names(field_.sh_degree)
    n = len(field_)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in names]
    header.append("end_header")
    k = n_coeffs(field_.sh_degree)
    cols = np.zeros((n, len(names)), dtype="<f4")
    cols[:, 0:3] = field_.mu
    cols[:, 6:9] = field_.sh[:, :, 0]
    if k > 1:
        cols[:, 9 : 9 + 3 * (k - 1)] = field_.sh[:, :, 1:].reshape(n, 3 * (k - 1))
    j = 9 + 3 * (k - 1)
    cols[:, j] = field_.opacity_logit
    cols[:, j + 1 : j + 4] = field_.log_scale
    cols[:, j + 4 : j + 8] = field_.rot
    path = Path(path)
    path.write_bytes(("\n".join(header) + "\n").encode("ascii") + cols.tobytes())
    if sidecar:
        meta = {
            "canonical_frame": int(field_.canonical_frame),
            "sh_degree": int(field_.sh_degree),
            "count": n,
            "confidence": [float(c) for c in field_.confidence],
            "source_frame": [int(f) for f in field_.source_frame],
        }
        Path(str(path) + ".json").write_text(json.dumps(meta))


def import_ply(path) -> GaussianField:
    path = Path(path)
    buf = path.read_bytes()
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise FormatError("missing ply magic or end_header", path=path, offset=0)
    lines = buf[:end].decode("ascii", errors="replace").split("\n")
    n = None
    props = []
    offset = 0
    for line in lines:
        parts = line.split()
        if not parts:
            offset += len(line) + 1
            continue
        if parts[0] == "format" and parts[1:2] != ["binary_little_endian"]:
            raise FormatError(f"unsupported PLY format {parts[1:2]}", path=path, offset=offset)
        if parts[0] == "element":
            if parts[1] != "vertex" or n is not None:
                raise FormatError(f"unexpected element {parts[1]}", path=path, offset=offset)
            n = int(parts[2])
        elif parts[0] == "property":
            if parts[1] != "float":
                raise FormatError(f"property type {parts[1]} is not float", path=path, offset=offset)
            props.append(parts[2])
        offset += len(line) + 1
    if n is None:
        raise FormatError("no vertex element", path=path, offset=0)
    k = (len(props) - 17) // 3 + 1
    degree = int(round(np.sqrt(k))) - 1
    if degree < 0 or degree > 3 or props != ply_property_names(degree):
        raise FormatError("vertex properties do not match the splat layout", path=path, offset=0)
    body = end + len(b"end_header\n")
    need = n * len(props) * 4
    if len(buf) - body != need:
        raise FormatError(f"expected {need} payload bytes, found {len(buf) - body}", path=path, offset=body)
    cols = np.frombuffer(buf, dtype="<f4", count=n * len(props), offset=body).reshape(n, len(props))
    sh = np.zeros((n, 3, k), dtype=np.float32)
    sh[:, :, 0] = cols[:, 6:9]
    if k > 1:
        sh[:, :, 1:] = cols[:, 9 : 9 + 3 * (k - 1)].reshape(n, 3, k - 1)
    j = 9 + 3 * (k - 1)
    meta_path = Path(str(path) + ".json")
    conf = np.ones(n, dtype=np.float32)
    frames = np.zeros(n, dtype=np.int64)
    canonical = 0
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        canonical = int(meta.get("canonical_frame", 0))
        if "confidence" in meta:
            conf = np.asarray(meta["confidence"], dtype=np.float32)
            frames = np.asarray(meta["source_frame"], dtype=np.int64)
    return GaussianField(
        cols[:, 0:3].copy(), cols[:, j + 1 : j + 4].copy(), cols[:, j + 4 : j + 8].copy(),
        cols[:, j].copy(), sh, conf, frames, canonical_frame=canonical, sh_degree=degree,
    )
