"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators needed by the extractors, the detection scores and the
losses are provided. Each operator checks its output for NaN/Inf and raises
:class:`NumericError` naming itself.

Subgradient conventions: d relu(x)/dx at 0 is 0, and max-reductions send the
whole gradient to the lowest index among ties.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import InvalidInputError, NumericError

L2_GUARD = 1e-12


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(op)
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward=backward_fn if req else None, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidInputError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    return _make(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def relu(x: Tensor) -> Tensor:
    """[x]_+ with zero subgradient at the kink."""
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


relu_clamp = relu


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, slope * x.data), (x,),
                 lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def clamp_max(x: Tensor, hi: float) -> Tensor:
    below = x.data <= hi
    return _make(np.minimum(x.data, hi), (x,), lambda g: (g * below,), "clamp_max")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


# --- reductions --------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max(x: Tensor, axis: int = -1, mask=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; entries where ``mask`` is False are ignored.

    Rows with no admissible entry yield 0 and receive no gradient.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    vals = x.data if mask is None else np.where(mask, x.data, -np.inf)
    arg = np.argmax(vals, axis=axis)  # first occurrence == lowest index on ties
    arg_e = np.expand_dims(arg, axis)
    out = np.take_along_axis(vals, arg_e, axis=axis)
    empty = ~np.isfinite(out)
    out = np.where(empty, 0.0, out)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg_e, np.where(empty, 0.0, g), axis=axis)
        return (gx,)

    return _make(out if keepdims else np.squeeze(out, axis), (x,), bw, "max")


def max_over_axis(x, axis=-1, mask=None, keepdims=False):
    return max(x, axis=axis, mask=mask, keepdims=keepdims)


def mean_over_axis(x, axis, keepdims=False):
    return mean(x, axis=axis, keepdims=keepdims)


# --- shape / indexing ----------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradients."""
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(out), (x,), bw, "index")


def gather_rows(x: Tensor, idx) -> Tensor:
    """x[idx] along the first axis for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]
    n = x.shape[0]

    def bw(g):
        g2 = g.reshape(idx.size, -1)
        flat = idx.reshape(-1)
        gx = np.stack([np.bincount(flat, weights=g2[:, c], minlength=n) for c in range(g2.shape[1])], axis=1)
        return (gx.reshape(x.shape),)

    return _make(out, (x,), bw, "gather_rows")


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


# --- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def pointwise_linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) over the last axis of x, for any leading shape."""
    lead = x.shape[:-1]
    if x.shape[-1] != w.shape[0]:
        raise InvalidInputError(f"pointwise_linear: {x.shape} vs weight {w.shape}")
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = L2_GUARD) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    clamped = norm < eps
    n = np.where(clamped, eps, norm)
    out = x.data / n

    def bw(g):
        # tangent projection where the norm is active; plain scaling where clamped
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(clamped, g / n, (g - out * dot) / n),)

    return _make(out, (x,), bw, "l2_normalize")


def _im2col(xp: np.ndarray, H: int, W: int, d: int) -> np.ndarray:
    cols = [xp[ky * d:ky * d + H, kx * d:kx * d + W, :] for ky in range(3) for kx in range(3)]
    return np.stack(cols, axis=2).reshape(H * W, -1)


def dilated_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """3x3 dilated cross-correlation, stride 1, zero 'same' padding.

    x is (H, W, Cin); kernel is (3, 3, Cin, Cout); output is (H, W, Cout).
    """
    if x.ndim != 3 or kernel.shape[:3] != (3, 3, x.shape[2]):
        raise InvalidInputError(f"dilated_conv2d: input {x.shape} vs kernel {kernel.shape}")
    H, W, Cin = x.shape
    Cout = kernel.shape[3]
    d = int(dilation)
    xp = np.pad(x.data, ((d, d), (d, d), (0, 0)))
    cols = _im2col(xp, H, W, d)
    kmat = kernel.data.reshape(9 * Cin, Cout)
    out = cols @ kmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(H, W, Cout)

    def bw(g):
        g2 = g.reshape(H * W, Cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gcols = (g2 @ kmat.T).reshape(H, W, 9, Cin)
        gxp = np.zeros_like(xp)
        for n in range(9):
            ky, kx = divmod(n, 3)
            gxp[ky * d:ky * d + H, kx * d:kx * d + W, :] += gcols[:, :, n, :]
        gx = gxp[d:d + H, d:d + W, :]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "dilated_conv2d")


def _box_sum(a: np.ndarray, r: int) -> np.ndarray:
    H, W = a.shape[:2]
    c = np.pad(a, ((r + 1, r), (r + 1, r)) + ((0, 0),) * (a.ndim - 2)).cumsum(0).cumsum(1)
    k = 2 * r + 1
    return c[k:k + H, k:k + W] - c[0:H, k:k + W] - c[k:k + H, 0:W] + c[0:H, 0:W]


def box_count(H: int, W: int, r: int) -> np.ndarray:
    return _box_sum(np.ones((H, W)), r)


def local_mean2d(x: Tensor, r: int) -> Tensor:
    """Per-channel mean over the in-bounds (2r+1)^2 window around each pixel of (H, W, C)."""
    H, W = x.shape[:2]
    cnt = box_count(H, W, r)[:, :, None]
    out = _box_sum(x.data, r) / cnt
    return _make(out, (x,), lambda g: (_box_sum(g / cnt, r),), "local_mean2d")


# --- backward ------------------------------------------------------------------

def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def backward(root: Tensor) -> None:
    """Accumulate d root / d leaf into ``leaf.grad`` for every leaf requiring grad.

    The graph is single-use: it is released afterwards and a second call raises.
    """
    if root.data.size != 1:
        raise InvalidInputError("backward requires a scalar output")
    if root._released:
        raise InvalidInputError("graph already consumed by an earlier backward pass")
    if not root.requires_grad:
        root._released = True
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in _topo(root):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._released:
            raise InvalidInputError("graph already consumed by an earlier backward pass")
        if g is not None:
            for p, gp in zip(node._parents, node._backward(g)):
                if not p.requires_grad or gp is None:
                    continue
                gp = np.asarray(gp, dtype=p.data.dtype).reshape(p.shape)
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp
        node._released = True
        node._backward = None
        node._parents = ()
    root._released = True


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    y = f(xt)
    backward(y)
    g_ad = np.zeros_like(x) if xt.grad is None else xt.grad
    g_fd = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x.copy())).item()
        flat[i] = orig - eps
        fm = f(Tensor(x.copy())).item()
        flat[i] = orig
        g_fd.reshape(-1)[i] = (fp - fm) / (2 * eps)
    rel = np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(rel.max()) if rel.size else 0.0


# --- optimizer -------------------------------------------------------------------

class Adam:
    """ADAM with a per-epoch exponential learning-rate schedule.

    ``set_epoch(e, E)`` sets lr = base_lr * 0.1 ** (e / E), so the rate has
    fallen to a tenth of its base value after E epochs.
    """

    def __init__(self, params: dict, base_lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float = 0.0):
        self.params = params
        self.clip_norm = clip_norm
        self.base_lr = base_lr
        self.lr = base_lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, grads: dict | None = None):
        """One update. Parameters without a gradient are left untouched.

        With ``clip_norm > 0`` the joint gradient is rescaled to at most that
        global L2 norm before the moment updates.
        """
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        grads = {k: g for k, g in grads.items() if g is not None and k in self.params}
        if self.clip_norm > 0:
            norm = float(np.sqrt(np.sum([np.vdot(g, g) for g in grads.values()])))
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def set_epoch(self, epochs_done: int, total_epochs: int):
        self.lr = self.base_lr * 0.1 ** (epochs_done / total_epochs)
        return self.lr


def adam_step(state: Adam, params=None, grads=None):
    state.step(grads)
    return state.params


def epoch_decay(state: Adam, total_epochs: int, epochs_done: int) -> float:
    return state.set_epoch(epochs_done, total_epochs)


# --- checkpoints -------------------------------------------------------------------

_MAGIC = b"PXPT"


def save_checkpoint(path, params: dict, extra: dict | None = None) -> None:
    """Binary file: magic, u64 header length, JSON header, raw little-endian payloads."""
    names = sorted(params)
    arrays = [np.array(getattr(params[n], "data", params[n]), order="C") for n in names]
    header = {"tensors": [{"name": n, "shape": list(a.shape), "dtype": a.dtype.newbyteorder("<").str}
                          for n, a in zip(names, arrays)],
              "extra": extra or {}}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for a in arrays:
            f.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise InvalidInputError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    off = 12 + n
    out = {}
    for t in header["tensors"]:
        dt = np.dtype(t["dtype"])
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        out[t["name"]] = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(tuple(t["shape"])).astype(dt.newbyteorder("="))
        off += count * dt.itemsize
    return out, header.get("extra", {})
