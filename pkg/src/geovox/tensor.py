"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operations the 3D U-Net and the regression losses need are
provided. Tensors carry ``float32`` data during training and ``float64``
during gradient checks; every op preserves the dtype of its inputs.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _record(out: Tensor, parents: tuple[Tensor, ...], fn: Callable[[np.ndarray], None]) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Leaves accumulate across calls; interior nodes are reset each call.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any trainable tensor")
    order = _topo_order(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._parents and node is not loss:
            node.grad = None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    out = Tensor(a.data + b.data)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _record(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(c))

    def bw(g):
        _accum(a, g * a.data.dtype.type(c))

    return _record(out, (a,), bw)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may have a single channel broadcast over ``a``'s."""
    broadcast = False
    if a.shape != b.shape:
        if (
            a.data.ndim == b.data.ndim
            and a.data.ndim >= 2
            and b.shape[1] == 1
            and a.shape[0] == b.shape[0]
            and a.shape[2:] == b.shape[2:]
        ):
            broadcast = True
        else:
            raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} incompatible")
    out = Tensor(a.data * b.data)

    def bw(g):
        _accum(a, g * b.data)
        gb = g * a.data
        if broadcast:
            gb = gb.sum(axis=1, keepdims=True)
        _accum(b, gb)

    return _record(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, x.data.dtype.type(0)))

    def bw(g):
        _accum(x, g * mask)

    return _record(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    out = Tensor(s)

    def bw(g):
        _accum(x, g * s * (1 - s))

    return _record(out, (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} incompatible")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def bw(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    return _record(out, (a, b), bw)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[B,C,...] + bias[B,C] broadcast over spatial axes."""
    if bias.data.ndim != 2 or bias.shape != x.shape[:2]:
        raise ShapeError(f"add_channel_bias: bias {bias.shape} vs x {x.shape}")
    extra = (1,) * (x.data.ndim - 2)
    out = Tensor(x.data + bias.data.reshape(bias.shape + extra))
    axes = tuple(range(2, x.data.ndim))

    def bw(g):
        _accum(x, g)
        _accum(bias, g.sum(axis=axes))

    return _record(out, (x, bias), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[B,n] @ weight[m,n].T + bias[m]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: x {x.shape} vs weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        _accum(x, g @ weight.data)
        _accum(weight, g.T @ x.data)
        if bias is not None:
            _accum(bias, g.sum(axis=0))

    return _record(out, parents, bw)


def tsum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _record(out, (x,), bw)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = as_tensor(target)
    _check_same(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size
    out = Tensor(np.asarray(np.mean(diff * diff), dtype=pred.dtype))

    def bw(g):
        gd = (2.0 / n) * g * diff
        _accum(pred, gd)
        _accum(target, -gd)

    return _record(out, (pred, target), bw)


# ---------------------------------------------------------------------------
# convolution, normalisation, resampling
# ---------------------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation, x[B,Ci,D,H,W] with weight[Co,Ci,k,k,k]."""
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-D x and weight, got {x.shape}, {weight.shape}")
    B, C, D, H, W = x.shape
    O, Ci, k, k2, k3 = weight.shape
    if Ci != C:
        raise ShapeError(f"conv3d: x has {C} channels, weight expects {Ci}")
    if not (k == k2 == k3) or k % 2 == 0:
        raise ConfigError(f"conv3d: kernel must be cubic and odd, got {weight.shape[2:]}")
    if stride < 1 or padding < 0:
        raise ConfigError("conv3d: stride must be >= 1 and padding >= 0")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv3d: bias shape {bias.shape}, expected ({O},)")
    Do, Ho, Wo = (_out_size(n, k, stride, padding) for n in (D, H, W))
    if min(Do, Ho, Wo) < 1:
        raise ShapeError("conv3d: input too small for kernel")
    wmat = weight.data.reshape(O, C * k * k * k)

    if k == 1 and stride == 1 and padding == 0:
        xs = x.data.reshape(B, C, D * H * W)
        y = np.matmul(wmat, xs)
        if bias is not None:
            y += bias.data[None, :, None]
        out = Tensor(y.reshape(B, O, D, H, W))

        def bw1(g):
            gs = g.reshape(B, O, D * H * W)
            if x.requires_grad:
                _accum(x, np.matmul(wmat.T, gs).reshape(x.shape))
            if weight.requires_grad:
                gw = np.einsum("bon,bcn->oc", gs, xs, optimize=True)
                _accum(weight, gw.reshape(weight.shape))
            if bias is not None:
                _accum(bias, gs.sum(axis=(0, 2)))

        return _record(out, (x, weight) if bias is None else (x, weight, bias), bw1)

    xp = x.data
    if padding:
        p = padding
        xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    s = stride
    offsets = [(i, j, l) for i in range(k) for j in range(k) for l in range(k)]

    def window(a, i, j, l):
        return a[:, :, i : i + s * Do : s, j : j + s * Ho : s, l : l + s * Wo : s]

    # im2col in channel-major layout: rows (channel, kd, kh, kw), columns (batch, voxel)
    xpt = xp.transpose(1, 0, 2, 3, 4)
    cols = np.empty((C, k * k * k, B, Do, Ho, Wo), dtype=x.dtype)
    for n, (i, j, l) in enumerate(offsets):
        cols[:, n] = window(xpt, i, j, l)
    cols = cols.reshape(C * k * k * k, B * Do * Ho * Wo)
    y = wmat @ cols
    if bias is not None:
        y += bias.data[:, None]
    out = Tensor(np.ascontiguousarray(y.reshape(O, B, Do, Ho, Wo).transpose(1, 0, 2, 3, 4)))
    padded_shape = (C, B) + xp.shape[2:]

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(O, -1)
        if weight.requires_grad:
            _accum(weight, (g2 @ cols.T).reshape(weight.shape))
        if bias is not None:
            _accum(bias, g2.sum(axis=1))
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(C, k * k * k, B, Do, Ho, Wo)
            dxpt = np.zeros(padded_shape, dtype=x.dtype)
            for n, (i, j, l) in enumerate(offsets):
                window(dxpt, i, j, l)[...] += dcols[:, n]
            dxp = dxpt.transpose(1, 0, 2, 3, 4)
            if padding:
                p = padding
                dxp = dxp[:, :, p:-p, p:-p, p:-p]
            _accum(x, np.ascontiguousarray(dxp))

    return _record(out, (x, weight) if bias is None else (x, weight, bias), bw)


def downsample_stride2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Halve each spatial extent with a stride-2 'same'-padded convolution."""
    return conv3d(x, weight, bias, stride=2, padding=weight.shape[-1] // 2)


def upsample_nearest2(x: Tensor) -> Tensor:
    if x.data.ndim != 5:
        raise ShapeError(f"upsample_nearest2: expected 5-D input, got {x.shape}")
    B, C, D, H, W = x.shape
    up = np.broadcast_to(x.data[:, :, :, None, :, None, :, None], (B, C, D, 2, H, 2, W, 2))
    out = Tensor(up.reshape(B, C, 2 * D, 2 * H, 2 * W))

    def bw(g):
        _accum(x, g.reshape(B, C, D, 2, H, 2, W, 2).sum(axis=(3, 5, 7)))

    return _record(out, (x,), bw)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel-group) slice, then per-channel affine."""
    if x.data.ndim < 3:
        raise ShapeError(f"group_norm: expected [B,C,...], got {x.shape}")
    B, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ConfigError(f"group_norm: {C} channels not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("group_norm: gamma/beta must have shape (C,)")
    spatial = x.shape[2:]
    xg = x.data.reshape(B, groups, -1)
    n = xg.shape[2]
    mean = xg.mean(axis=2, keepdims=True)
    xc = xg - mean
    var = np.mean(xc * xc, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * len(spatial)
    out = Tensor(xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape))
    red = (0,) + tuple(range(2, x.data.ndim))

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=red))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=red))
        if x.requires_grad:
            dxh = (g * gamma.data.reshape(bshape)).reshape(B, groups, n)
            xh = xhat.reshape(B, groups, n)
            dx = inv * (dxh - dxh.mean(axis=2, keepdims=True) - xh * (dxh * xh).mean(axis=2, keepdims=True))
            _accum(x, dx.reshape(x.shape))

    return _record(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------

class ParameterSet:
    """Ordered name -> trainable Tensor map."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._items: dict[str, Tensor] = {}
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._items:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        t.name = name
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self):
        return iter(self._items.items())

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def values(self) -> list[Tensor]:
        return list(self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def count(self) -> int:
        return int(sum(t.data.size for t in self._items.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._items.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._items) - set(arrays)
        if missing:
            raise ShapeError(f"missing parameters: {sorted(missing)[:5]}")
        for k, t in self._items.items():
            a = np.asarray(arrays[k])
            if a.shape != t.shape:
                raise ShapeError(f"parameter {k}: shape {a.shape}, expected {t.shape}")
            t.data = a.astype(t.dtype, copy=True)


def clip_grad_norm(params: ParameterSet, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for _, t in params:
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for _, t in params:
            if t.grad is not None:
                t.grad *= t.grad.dtype.type(factor)
    return norm


class Adam:
    def __init__(self, params: ParameterSet, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params}
        self.v = {k: np.zeros_like(t.data) for k, t in params}

    def step(self) -> None:
        for name, t in self.params:
            if t.grad is None:
                raise UsageError(f"parameter {name!r} has no gradient; run backward() first")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, t in self.params:
            g = t.grad
            dt = t.dtype.type
            m = self.m[name]
            v = self.v[name]
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * (g * g)
            mhat = m / dt(c1)
            vhat = v / dt(c2)
            t.data = t.data - dt(self.lr) * mhat / (np.sqrt(vhat) + dt(self.eps))

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.m:
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=self.v[k].dtype)
        self.step_count = int(step_count)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-4, index=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (modified in place, restored)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(flat.size, dtype=np.float64)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |g_a - g_fd| / max(1, |g_a|, |g_fd|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
