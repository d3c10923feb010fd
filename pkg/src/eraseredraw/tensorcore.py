"""Dense float64 tensors with a small reverse-mode autodiff engine.

Only the primitives needed by the denoiser and the segmenter are provided,
and there is no general broadcasting: every op documents the exact shapes it
accepts. Layout is channel-first, ``(N, C, H, W)``.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("tensor data contains NaN or Inf")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag}, requires_grad={self.requires_grad})"

    # thin operator sugar over the primitives below
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out._op = op
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def _logistic(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = x.data / (1.0 + np.exp(-x.data))

    def backward(g):
        s = _logistic(x.data)
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _result(out, (x,), backward, "silu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _logistic(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# ---------------------------------------------------------------- linear algebra

def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x[N, D] @ w[D, K]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {x.shape} @ {w.shape}")

    def backward(g):
        return (g @ w.data.T, x.data.T @ g)

    return _result(x.data @ w.data, (x, w), backward, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b[C]`` along axis 1 of ``x[N, C]`` or ``x[N, C, H, W]``."""
    if b.data.ndim != 1 or x.data.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    if x.data.ndim == 2:
        return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    data = x.data + b.data[None, :, None, None]
    return _result(data, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))), "add_bias")


def add_channel_bias(x: Tensor, c: Tensor) -> Tensor:
    """Per-sample, per-channel bias: ``x[N, C, H, W] + c[N, C]``."""
    if x.data.ndim != 4 or c.data.ndim != 2 or x.shape[:2] != c.shape:
        raise ValueError(f"add_channel_bias: cannot add {c.shape} to {x.shape}")
    data = x.data + c.data[:, :, None, None]
    return _result(data, (x, c), lambda g: (g, g.sum(axis=(2, 3))), "add_channel_bias")


def embedding(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]`` for an integer index array of shape ``(N,)``."""
    index = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2 or index.ndim != 1:
        raise ValueError("embedding: expects a 2-D table and a 1-D index")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError("embedding: index out of range")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return _result(table.data[index], (table,), backward, "embedding")


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, w: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of ``x[N, C, H, W]`` with ``w[F, C, kH, kW]``.

    Computed as one matmul per kernel offset over a channel-last buffer; the
    result is a channel-first view of channel-last memory, which the next
    conv consumes without a transposing copy.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {cw}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d: padding must be >= 0 and stride >= 1")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xp = np.zeros((n, hp, wp, c))
        xp[:, padding:padding + h, padding:padding + wd] = xh
    else:
        xp = xh
    taps = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # kH, kW, C, F

    def window(i, j):
        return xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride].reshape(-1, c)

    out = np.zeros((n * ho * wo, f))
    for i in range(kh):
        for j in range(kw):
            out += window(i, j) @ taps[i, j]

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gtaps = np.empty((kh, kw, c, f))
        gxp = np.zeros((n, hp, wp, c)) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                gtaps[i, j] = window(i, j).T @ g2
                if gxp is not None:
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        (g2 @ taps[i, j].T).reshape(n, ho, wo, c)
        gx = None
        if gxp is not None:
            gx = gxp[:, padding:padding + h, padding:padding + wd].transpose(0, 3, 1, 2)
        return (gx, gtaps.transpose(3, 2, 0, 1))

    return _result(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2), (x, w), backward, "conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; H and W must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: spatial size {h}x{w} is not even")
    xh = x.data.transpose(0, 2, 3, 1)
    data = xh.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4)).transpose(0, 3, 1, 2)

    def backward(g):
        gh = g.transpose(0, 2, 3, 1)
        return (np.repeat(np.repeat(gh * 0.25, 2, axis=1), 2, axis=2).transpose(0, 3, 1, 2),)

    return _result(data, (x,), backward, "avg_pool2")


def upsample2(x: Tensor) -> Tensor:
    """2x nearest-neighbour upsampling."""
    n, c, h, w = x.shape
    xh = x.data.transpose(0, 2, 3, 1)
    data = np.repeat(np.repeat(xh, 2, axis=1), 2, axis=2).transpose(0, 3, 1, 2)

    def backward(g):
        gh = g.transpose(0, 2, 3, 1).reshape(n, h, 2, w, 2, c)
        return (gh.sum(axis=(2, 4)).transpose(0, 3, 1, 2),)

    return _result(data, (x,), backward, "upsample2")


# ---------------------------------------------------------------- reductions / losses

def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    _same_shape("mse", pred, target)
    d = pred.data - target.data
    k = 2.0 / d.size

    def backward(g):
        gd = g * k * d
        return (gd, -gd)

    return _result(np.asarray(np.mean(d * d)), (pred, target), backward, "mse")


def masked_mse(pred: Tensor, target: Tensor, mask: np.ndarray) -> Tensor:
    """Squared error over masked pixels, normalised per sample by ``C * area``.

    ``pred``/``target`` are ``(N, C, H, W)``; ``mask`` is a constant
    ``(N, H, W)`` array of zeros and ones. The result is the batch mean of the
    per-sample masked losses.
    """
    _same_shape("masked_mse", pred, target)
    n, c = pred.shape[:2]
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (n,) + pred.shape[2:]:
        raise ValueError(f"masked_mse: mask shape {mask.shape} does not match {pred.shape}")
    area = mask.reshape(n, -1).sum(axis=1)
    if np.any(area == 0):
        raise ValueError("masked_mse: empty mask")
    w = mask[:, None, :, :] / (c * area * n)[:, None, None, None]
    d = pred.data - target.data

    def backward(g):
        gd = g * 2.0 * w * d
        return (gd, -gd)

    return _result(np.asarray(np.sum(w * d * d)), (pred, target), backward, "masked_mse")


def bce(prob: Tensor, target: Tensor, eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy of probabilities against {0,1} targets."""
    _same_shape("bce", prob, target)
    p = np.clip(prob.data, eps, 1.0 - eps)
    y = target.data
    n = p.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))

    def backward(g):
        return (g * (p - y) / (p * (1.0 - p) * n), g * (np.log(1.0 - p) - np.log(p)) / n)

    return _result(np.asarray(loss), (prob, target), backward, "bce")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),), "mean")


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Leaves that require grad get ``.grad`` set. The returned map holds one
    gradient per leaf reached; any tensor in ``params`` that the loss does not
    depend on is included with a zero gradient. The recorded graph is
    released afterwards, so a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward: graph already consumed; rebuild the loss first")
    grads: dict[int, np.ndarray] = {}
    result: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        order = _topo_order(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                result[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node.requires_grad = False
                node._consumed = True
    loss._consumed = True
    for p in params or ():
        if p not in result:
            p.grad = np.zeros_like(p.data)
            result[p] = p.grad
    return result


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
               samples_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    Relative error uses the denominator ``max(|a|, |b|, 1e-8)``. With
    ``samples_per_param`` only that many randomly chosen entries of each
    parameter are differenced.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError("grad_check: eps must lie in [1e-5, 1e-2]")
    grads = backward(f(), params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            analytic = grads[p].reshape(-1)
            idx = np.arange(flat.size)
            if samples_per_param is not None and flat.size > samples_per_param:
                idx = rng.choice(flat.size, size=samples_per_param, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                if not np.isfinite(numeric):
                    raise FloatingPointError("grad_check: non-finite finite difference")
                a = analytic[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimisation

@dataclass
class OptimizerState:
    learning_rate: float
    adaptive: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             state: OptimizerState) -> Mapping[str, Tensor]:
    """One update of every parameter in ``params``.

    Plain variant: ``p - lr * g``. Adaptive variant: bias-corrected first and
    second moment estimates (Adam).
    """
    state.step += 1
    lr = state.learning_rate
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"sgd_step: gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not state.adaptive:
            p.data = p.data - lr * g
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** state.step)
        v_hat = v / (1.0 - state.beta2 ** state.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ---------------------------------------------------------------- checkpoints

MAGIC = b"RFCK"
VERSION = 1


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write named arrays to the flat ``RFCK`` container (little-endian)."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an RFCK checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ValueError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise ValueError(f"{path}: truncated checkpoint")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise ValueError(f"{path}: truncated checkpoint")
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(np.float64)
        pos += nbytes
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out


# ---------------------------------------------------------------- parameter init

def he_conv(rng: np.random.Generator, f: int, c: int, k: int, name: str) -> Tensor:
    std = np.sqrt(2.0 / (c * k * k))
    return Tensor(rng.normal(0.0, std, size=(f, c, k, k)), requires_grad=True, name=name)


def he_linear(rng: np.random.Generator, d: int, k: int, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(1.0 / d), size=(d, k)), requires_grad=True, name=name)


def zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)
