"""Dense tensors with a reverse-mode gradient tape.

Every differentiable primitive computes its forward value with numpy and
records a node on the active :class:`Tape` holding a closure that maps the
output gradient to input gradients.  ``backprop`` replays the tape in
reverse.  Leaf tensors with ``requires_grad`` accumulate into ``.grad``
across calls until :meth:`Tensor.zero_grad` is invoked.

Precision is float32 by default; gradient checks switch to float64 via
:func:`precision`.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError, NumericError

_default_dtype = np.float32


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = old


class Node:
    __slots__ = ("op", "inputs", "output", "backward", "saved")

    def __init__(self, op, inputs, output, backward, saved=None):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.saved = saved


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.enabled = True

    def record(self, node: Node):
        self.nodes.append(node)

    def reset(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_tape = Tape()


def get_tape() -> Tape:
    return _tape


@contextlib.contextmanager
def no_grad():
    was = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = was


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _check_finite(op, arr):
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))
        where = tuple(int(i) for i in bad[0]) if bad.size else ()
        raise NumericError(f"{op} produced a non-finite value at index {where}")


def _make(op, value, inputs, backward, saved=None) -> Tensor:
    _check_finite(op, value)
    needs = _tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs, dtype=value.dtype)
    if needs:
        node = Node(op, tuple(inputs), out, backward, saved)
        out.node = node
        _tape.record(node)
    return out


def _check_broadcast(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    # trailing-vector case: small matches a suffix of big (leading 1s allowed)
    stripped = tuple(small)
    while stripped and stripped[0] == 1:
        stripped = stripped[1:]
    if len(stripped) <= len(big) and (not stripped or tuple(big[len(big) - len(stripped):]) == stripped):
        return
    # leading-batch case: same rank, small equals big's prefix padded with trailing 1s
    if len(small) == len(big):
        k = len(small)
        while k > 0 and small[k - 1] == 1:
            k -= 1
        if tuple(small[:k]) == tuple(big[:k]):
            return
    raise DimensionError(f"{op}: cannot combine shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _binary_operands(op, a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op} needs at least one Tensor operand")
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(op, a, b)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands("div", a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make("div", out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward(g):
        return (g * p * x.data ** (p - 1),)

    return _make("pow", x.data**p, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def sigmoid(x: Tensor) -> Tensor:
    # split on sign so neither branch overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.logaddexp(0.0, d).astype(d.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return _make("softplus", out, (x,), lambda g: (g * sig,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _make("gelu", out.astype(d.dtype), (x,), backward)


def clamp(x: Tensor, lo=None, hi=None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    live = np.ones(x.shape, dtype=bool)
    if lo is not None:
        live &= x.data >= lo
    if hi is not None:
        live &= x.data <= hi
    return _make("clamp", out, (x,), lambda g: (g * live,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max-subtraction."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), backward)


softmax_lastdim = softmax


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last dim {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=red)
        dbias = g.sum(axis=red)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _make("layer_norm", out, (x, gain, bias), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} differ")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", a.data @ b.data, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        ax = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(ax, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make("index", np.array(out, copy=True), (x,), backward)


def take_rows(x: Tensor, rows) -> Tensor:
    """Gather along axis 0 (used to select surviving memory tokens)."""
    rows = np.asarray(rows, dtype=np.int64)
    return index(x, rows)


def masked_select(x: Tensor, mask) -> Tensor:
    """Select entries where ``mask`` is true.

    ``mask`` may cover the full shape (result is 1-D) or a leading prefix of
    it (result keeps the trailing dims).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[: mask.ndim]:
        raise DimensionError(f"masked_select: mask {mask.shape} does not prefix {x.shape}")
    out = x.data[mask]

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[mask] = g
        return (full,)

    return _make("masked_select", out, (x,), backward)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make("mean", out, (x,), backward)


def norm_lastdim(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis; gradient taken as zero at the origin."""
    out = np.sqrt((x.data * x.data).sum(axis=-1))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (x.data * scale[..., None],)

    return _make("norm", out, (x,), backward)


def backprop(loss: Tensor):
    """Propagate d(loss)/d(.) to every ``requires_grad`` leaf reachable on the tape."""
    if loss.size != 1:
        raise ContractError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.dtype)
            if t.node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives ``x`` itself with one entry perturbed in place; the
    original value is restored afterwards.
    """
    if eps <= 0:
        raise ContractError(f"finite difference step must be positive, got {eps}")
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(np.asarray(_scalar_value(f(x))))
            flat[i] = orig - eps
            fm = float(np.asarray(_scalar_value(f(x))))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"finite difference produced a non-finite value at index {tuple(int(j) for j in np.unravel_index(i, x.shape))}")
            grad.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return grad


def _scalar_value(v):
    if isinstance(v, Tensor):
        return v.data
    return v


def max_rel_error(analytic, numeric, floor: float = 1e-10, rel_floor: float = 1e-4) -> float:
    """max |a - n| / max(|a|, |n|, floor, rel_floor * max|n|) over all entries.

    ``rel_floor`` keeps entries many orders below the group's largest
    gradient from being judged on finite-difference roundoff alone.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    scale = max(floor, rel_floor * float(np.max(np.abs(n))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), scale)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(f: Callable[[], Tensor], inputs: Iterable[Tensor], eps: float = 1e-5, floor: float = 1e-10) -> float:
    """Compare backprop against central differences for every input.

    ``f`` takes no arguments and closes over ``inputs``.  Returns the worst
    relative error found.
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    _tape.reset()
    backprop(f())
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        numeric = finite_diff_grad(lambda _x: f(), t, eps)
        worst = max(worst, max_rel_error(analytic, numeric, floor))
    _tape.reset()
    return worst


# -- checkpoint I/O -----------------------------------------------------------

CKPT_MAGIC = b"PF3R"
CKPT_VERSION = 1


def save_checkpoint(path, named: dict):
    """Write ``{name: array}`` in the little-endian PF3R layout."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(named))]
    for name, value in named.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ContractError(f"checkpoint entry {name!r} exceeds format limits")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict:
    buf = Path(path).read_bytes()
    pos = 0

    def need(n):
        if pos + n > len(buf):
            raise FormatError("truncated checkpoint", path=path, offset=pos)

    need(12)
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", path=path, offset=0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path=path, offset=4)
    pos = 12
    out = {}
    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 1)
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(nbytes)
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", path=path, offset=pos)
    return out
