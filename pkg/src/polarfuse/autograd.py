"""Small define-by-run reverse-mode engine over dense numpy arrays.

Feature grids are ``(H, W, C)`` arrays. There is no broadcasting: every
binary op requires equal shapes. Training runs in float32, gradient checks in
float64; an op never changes the dtype of its inputs.
"""
from __future__ import annotations

import json
import struct
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def param(name: str, values) -> Tensor:
    return Tensor(np.array(values), requires_grad=True, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- channel ops ------------------------------------------------------------

def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-cell affine map over channels: ``(H, W, Cin) -> (H, W, Cout)``."""
    if x.data.ndim != 3 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeMismatch(f"conv1x1 expects (H,W,C), (Cin,Cout), (Cout,); got "
                            f"{x.shape}, {weight.shape}, {bias.shape}")
    h, w, cin = x.shape
    if weight.shape[0] != cin or bias.shape[0] != weight.shape[1]:
        raise ShapeMismatch(f"conv1x1: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    flat = x.data.reshape(-1, cin)
    out = (flat @ weight.data + bias.data).reshape(h, w, -1)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (
            (g2 @ weight.data.T).reshape(x.shape),
            flat.T @ g2,
            g2.sum(axis=0),
        )

    return _node(out, (x, weight, bias), backward, "conv1x1")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"concat_channels: {a.shape} vs {b.shape}")
    ca = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return _node(out, (a, b), lambda g: (g[..., :ca], g[..., ca:]), "concat")


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeMismatch(f"channel slice [{start}:{stop}] of {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _node(a.data[..., start:stop].copy(), (a,), backward, "slice")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


# -- reductions and losses --------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, g / n),), "mean")


def mse(a, b, reduction: str = "mean") -> Tensor:
    """Squared deviation ``sum((a - b)^2)``, divided by the element count for ``mean``."""
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "mse")
    d = a.data - b.data
    n = d.size if reduction == "mean" else 1
    out = np.asarray((d * d).sum() / n)
    return _node(out, (a, b), lambda g: (2 * g * d / n, -2 * g * d / n), "mse")


def l1(a, b, reduction: str = "mean") -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "l1")
    d = a.data - b.data
    n = d.size if reduction == "mean" else 1
    sgn = np.sign(d)
    out = np.asarray(np.abs(d).sum() / n)
    return _node(out, (a, b), lambda g: (g * sgn / n, -g * sgn / n), "l1")


def bce_with_logits(logits: Tensor, target: np.ndarray, weight: Optional[np.ndarray] = None,
                    normalizer: Optional[float] = None) -> Tensor:
    """Weighted binary cross-entropy ``sum(w * bce) / normalizer``; target may be soft.

    ``normalizer`` defaults to ``sum(w)``, i.e. a weighted mean.
    """
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    if t.shape != z.shape:
        raise ShapeMismatch(f"bce: logits {z.shape} vs target {t.shape}")
    w = np.ones_like(z) if weight is None else np.asarray(weight, dtype=z.dtype)
    wsum = w.sum() if normalizer is None else z.dtype.type(normalizer)
    # softplus(z) - t z, written to avoid overflow
    loss = np.maximum(z, 0) - t * z + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((w * loss).sum() / wsum)
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return _node(out, (logits,), lambda g: (g * w * (p - t) / wsum,), "bce")


def masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean absolute error over cells where ``mask`` (H, W) is set; 0 when none are."""
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape or mask.shape != pred.shape[:-1]:
        raise ShapeMismatch(f"masked_l1: {pred.shape}, {t.shape}, {mask.shape}")
    m = mask.astype(pred.data.dtype)[..., None]
    n = max(float(mask.sum()), 1.0)
    d = (pred.data - t) * m
    out = np.asarray(np.abs(d).sum() / n)
    return _node(out, (pred,), lambda g: (g * np.sign(d) / n,), "masked_l1")


# -- graph ------------------------------------------------------------------

def _topo(root: Tensor) -> List[Tensor]:
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        assert state.get(key) != 1, "graph cycle"
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and state.get(id(p)) != 2:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf parameter."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = grads[k] + pg if k in grads else pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad[...] = 0


class SGD:
    """Classical momentum: ``v <- m v + g``, ``p <- p - lr v``."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= (self.lr * v).astype(p.data.dtype)

    def zero_grad(self) -> None:
        zero_grads(self.params)


def sgd_step(params, lr: float, momentum: float = 0.0, state: Optional[list] = None) -> list:
    """Functional form of one momentum step; returns the updated velocity state."""
    params = list(params)
    if state is None:
        state = [np.zeros_like(p.data) for p in params]
    for p, v in zip(params, state):
        v *= momentum
        v += p.grad
        p.data -= (lr * v).astype(p.data.dtype)
    return state


# -- gradient checking ------------------------------------------------------

def numeric_grad(fn: Callable[[], Tensor], p: Tensor, eps: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(p.data)
    flat, gflat = p.data.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences over ``params``."""
    zero_grads(params)
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        worst = max(worst, max_relative_error(analytic, numeric_grad(fn, p, eps)))
    return worst


# -- tensor container -------------------------------------------------------

CONTAINER_MAGIC = b"PFTC"
CONTAINER_VERSION = 1


class ContainerError(ValueError):
    pass


def save_tensors(tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    """Serialize named arrays as float32 records behind a JSON metadata block.

    Layout: magic, u16 version, u32 meta length, meta JSON, u32 record count,
    then per record: u16 name length, name, u8 ndim, u32 per dim, float32 payload.
    """
    blob = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CONTAINER_MAGIC, struct.pack("<HI", CONTAINER_VERSION, len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name in tensors:
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def load_tensors(data: bytes) -> tuple:
    if data[:4] != CONTAINER_MAGIC:
        raise ContainerError(f"bad magic {data[:4]!r}")
    version, mlen = struct.unpack_from("<HI", data, 4)
    if version != CONTAINER_VERSION:
        raise ContainerError(f"container version {version} unsupported")
    pos = 10
    meta = json.loads(data[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(data):
                raise ContainerError(f"record {name!r} runs past end of data")
            out[name] = np.frombuffer(data, "<f4", n, pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from None
    if pos != len(data):
        raise ContainerError("trailing bytes after last record")
    return out, meta
