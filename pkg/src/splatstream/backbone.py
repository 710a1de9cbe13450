"""ViT encoder, intertwined target/reference decoders and the dense heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    dim_enc: int = 128
    dim_dec: int = 96
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    n_heads: int = 4
    sh_degree: int = 1
    mlp_ratio: int = 4
    head_hidden: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError("image_size must be divisible by patch_size")
        if self.dim_enc % self.n_heads or self.dim_dec % self.n_heads:
            raise ContractError("model dims must be divisible by n_heads")
        if not 0 <= self.sh_degree <= 3:
            raise ContractError(f"sh_degree must be in 0..3, got {self.sh_degree}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid**2

    @property
    def dim_key(self) -> int:
        return self.dim_dec

    @property
    def sh_coeffs(self) -> int:
        return (self.sh_degree + 1) ** 2

    @property
    def gaussian_channels(self) -> int:
        return 3 + 4 + 1 + 3 * self.sh_coeffs

    def to_dict(self):
        return asdict(self)


@dataclass
class FeatureMap:
    """Token set with a role tag (encoded / query / fused / decoded)."""

    tokens: Tensor
    role: str
    frame: int | None = None

    @property
    def shape(self):
        return self.tokens.shape


class Module:
    """Minimal parameter container; list attributes are named ``<attr><i>``."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
                p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _param(rng, shape, std, name=None):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, std=None):
        std = np.sqrt(2.0 / (n_in + n_out)) if std is None else std
        self.w = _param(rng, (n_in, n_out), std)
        self.b = _zeros((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class LayerNorm(Module):
    def __init__(self, dim):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = _zeros((dim,))

    def __call__(self, x):
        return tn.layer_norm(x, self.gain, self.bias, 1e-6)


class MLP(Module):
    def __init__(self, rng, dim, hidden, out=None):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, out or dim)

    def __call__(self, x):
        return self.fc2(tn.gelu(self.fc1(x)))


class Attention(Module):
    def __init__(self, rng, dim, n_heads):
        self.n_heads = n_heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def _split(self, x):
        p, d = x.shape
        return x.reshape(p, self.n_heads, d // self.n_heads).transpose(1, 0, 2)

    def __call__(self, x: Tensor, ctx: Tensor | None = None) -> Tensor:
        ctx = x if ctx is None else ctx
        q, k, v = self._split(self.wq(x)), self._split(self.wk(ctx)), self._split(self.wv(ctx))
        scale = 1.0 / np.sqrt(q.shape[-1])
        att = tn.softmax((q @ k.transpose(0, 2, 1)) * scale)
        out = (att @ v).transpose(1, 0, 2).reshape(x.shape[0], x.shape[1])
        return self.wo(out)


class EncoderBlock(Module):
    def __init__(self, rng, dim, n_heads, mlp_ratio):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, n_heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, dim * mlp_ratio)

    def __call__(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class DecoderBlock(Module):
    """Self-attention, then cross-attention to the partner stream, then MLP."""

    def __init__(self, rng, dim, n_heads, mlp_ratio):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, n_heads)
        self.ln_q = LayerNorm(dim)
        self.ln_kv = LayerNorm(dim)
        self.cross = Attention(rng, dim, n_heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, dim * mlp_ratio)

    def __call__(self, x, other):
        x = x + self.attn(self.ln1(x))
        x = x + self.cross(self.ln_q(x), self.ln_kv(other))
        return x + self.mlp(self.ln2(x))


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """[H, W, C] -> [P, patch*patch*C] with row-major patch order."""
    h, w, c = image.shape
    g_h, g_w = h // patch, w // patch
    x = image.reshape(g_h, patch, g_w, patch, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(g_h * g_w, patch * patch * c)


def unpatchify(tokens: Tensor, grid: int, patch: int) -> Tensor:
    """[P, patch*patch*C] -> [H, W, C]; inverse of :func:`patchify`."""
    c = tokens.shape[1] // (patch * patch)
    x = tokens.reshape(grid, grid, patch, patch, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(grid * patch, grid * patch, c)


class Backbone(Module):
    """Shared encoder, the two intertwined decoders, and the dense heads.

    The memory projections live in :class:`splatstream.memory.MemoryNet`,
    which is owned by :class:`splatstream.pipeline.Model`.
    """

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        p = cfg.patch_size
        de, dd = cfg.dim_enc, cfg.dim_dec

        self.patch = Linear(rng, p * p * 3, de)
        self.pos = _param(rng, (cfg.n_tokens, de), 0.02)
        self.enc = Module()
        self.enc.block = [EncoderBlock(rng, de, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_enc_layers)]
        self.enc.norm = LayerNorm(de)

        # stands in for the fused memory readout of the first frame
        self.boot = Linear(rng, de, de)

        self.dec_in_t = Linear(rng, de, dd)
        self.dec_in_r = Linear(rng, de, dd)
        self.dec_t = Module()
        self.dec_t.block = [DecoderBlock(rng, dd, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_dec_layers)]
        self.dec_t.norm = LayerNorm(dd)
        self.dec_r = Module()
        self.dec_r.block = [DecoderBlock(rng, dd, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_dec_layers)]
        self.dec_r.norm = LayerNorm(dd)

        self.qmlp = MLP(rng, dd + de, cfg.head_hidden, cfg.dim_key)

        hid = cfg.head_hidden
        self.pmlp = MLP(rng, dd, hid, p * p * 4)
        self.gmlp = MLP(rng, dd, hid, p * p * cfg.gaussian_channels)
        self._init_head_biases()

    def _init_head_biases(self):
        p2 = self.cfg.patch_size**2
        # pointmap z starts in front of the camera
        b = self.pmlp.fc2.b.data.reshape(p2, 4)
        b[:, 2] = 1.0
        self.pmlp.fc2.w.data *= 0.1
        nc = self.cfg.gaussian_channels
        b = self.gmlp.fc2.b.data.reshape(p2, nc)
        b[:, 0:3] = np.log(0.02)
        b[:, 3] = 1.0
        self.gmlp.fc2.w.data *= 0.1

    # -- operations ----------------------------------------------------------

    def patch_embed(self, image: np.ndarray) -> FeatureMap:
        s = self.cfg.image_size
        image = np.asarray(image)
        if image.shape != (s, s, 3):
            raise DimensionError(f"expected a {s}x{s}x3 image, got {image.shape}")
        patches = Tensor(patchify(image, self.cfg.patch_size), dtype=self.pos.dtype)
        return FeatureMap(self.patch(patches) + self.pos, "pre")

    def encode(self, f_pre: FeatureMap) -> FeatureMap:
        x = f_pre.tokens
        if x.shape[-1] != self.cfg.dim_enc:
            raise DimensionError(f"encoder expects dim {self.cfg.dim_enc}, got {x.shape[-1]}")
        for blk in self.enc.block:
            x = blk(x)
        return FeatureMap(self.enc.norm(x), "encoded", f_pre.frame)

    def encode_image(self, image, frame=None) -> FeatureMap:
        fm = self.encode(self.patch_embed(image))
        fm.frame = frame
        return fm

    def bootstrap_fused(self, f_enc: FeatureMap) -> FeatureMap:
        return FeatureMap(self.boot(f_enc.tokens), "fused", f_enc.frame)

    def decode_pair(self, f_t: FeatureMap, f_fused: FeatureMap):
        """Returns (target-decoded f_t^{h'}, reference-decoded f_{t-1}^h)."""
        if f_t.shape[0] != f_fused.shape[0]:
            raise DimensionError(f"token counts differ: {f_t.shape[0]} vs {f_fused.shape[0]}")
        xt = self.dec_in_t(f_t.tokens)
        xr = self.dec_in_r(f_fused.tokens)
        for bt, br in zip(self.dec_t.block, self.dec_r.block):
            xt, xr = bt(xt, xr), br(xr, xt)
        return (
            FeatureMap(self.dec_t.norm(xt), "decoded_target", f_t.frame),
            FeatureMap(self.dec_r.norm(xr), "decoded_reference", f_fused.frame),
        )

    def query_head(self, f_hprime: FeatureMap, f_t: FeatureMap) -> FeatureMap:
        if f_hprime.frame is not None and f_t.frame is not None and f_hprime.frame != f_t.frame:
            raise ContractError(f"query head inputs come from frames {f_hprime.frame} and {f_t.frame}")
        x = tn.concat([f_hprime.tokens, f_t.tokens], axis=1)
        return FeatureMap(self.qmlp(x), "query", f_t.frame)

    def out_head(self, f_h: FeatureMap):
        """Dense pointmap [H,W,3] and confidence [H,W] with C = 1 + exp(c)."""
        cfg = self.cfg
        dense = unpatchify(self.pmlp(f_h.tokens), cfg.grid, cfg.patch_size)
        xyz = dense[:, :, 0:3]
        conf = tn.exp(dense[:, :, 3]) + 1.0
        return xyz, conf

    def gaussian_head(self, f_h: FeatureMap) -> Tensor:
        """Raw per-pixel Gaussian parameters [H, W, 3+4+1+3K]."""
        cfg = self.cfg
        return unpatchify(self.gmlp(f_h.tokens), cfg.grid, cfg.patch_size)
