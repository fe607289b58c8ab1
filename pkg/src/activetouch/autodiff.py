"""Minimal dense-tensor reverse-mode autodiff engine.

Tensors wrap float64 numpy arrays. Operations executed while a Tape is
active are recorded in order; Tape.backward replays them in exact reverse
order, accumulating gradients additively. Only the primitives needed by
the learned components in this repository are provided.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree


class AutodiffError(RuntimeError):
    pass


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple, callable]] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        assert _TAPE_STACK.pop() is self

    def record(self, out: "Tensor", inputs: tuple, backward) -> None:
        self.ops.append((out, inputs, backward))

    def backward(self, loss: "Tensor") -> None:
        """Seed d(loss)/d(loss) = 1 and propagate through the tape."""
        if loss.data.size != 1:
            raise AutodiffError("backward needs a scalar loss")
        for out, _, _ in self.ops:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.ops):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not isinstance(inp, Tensor):
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g


def _current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul_scalar(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple, backward) -> Tensor:
    tape = _current_tape()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                           _unbroadcast(g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                           _unbroadcast(g * a.data, b.data.shape)))


def mul_scalar(a, s: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def spmm(sp, a) -> Tensor:
    """Sparse (scipy) @ dense tensor; the sparse matrix is a constant."""
    a = _as_tensor(a)
    out = Tensor(sp @ a.data)
    spt = sp.T.tocsr()
    return _record(out, (a,), lambda g: (spt @ g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    return _record(out, (a,), lambda g: (g * mask,))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sin(a.data))
    return _record(out, (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.cos(a.data))
    return _record(out, (a,), lambda g: (g * -np.sin(a.data),))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(ts), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def gather_rows(a, idx) -> Tensor:
    """out[i] = a[idx[i]]; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), backward)


def max_over_axis(a, axis: int = 0) -> Tensor:
    """Max reduction; gradient routed to the first argmax on ties."""
    a = _as_tensor(a)
    out = Tensor(a.data.max(axis=axis))
    arg = a.data.argmax(axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(arg, axis),
                          np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _record(out, (a,), backward)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.array(a.data.mean()))
    n = a.data.size
    return _record(out, (a,), lambda g: (np.full_like(a.data, np.asarray(g).reshape(-1)[0] / n),))


def tsum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.array(a.data.sum(axis=axis)))

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, np.asarray(g).reshape(-1)[0]),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _record(out, (a,), backward)


def mse(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    diff = a.data - b.data
    out = Tensor(np.array((diff * diff).mean()))
    n = diff.size

    def backward(g):
        base = 2.0 * np.asarray(g).reshape(-1)[0] / n * diff
        return base, -base

    return _record(out, (a, b), backward)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, ho, wo, k, k),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]))
    return windows.reshape(b, c, ho * wo, k * k), ho, wo


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution (cross-correlation), NCHW, square kernel."""
    x, w = _as_tensor(x), _as_tensor(w)
    b, c, h, hh = x.data.shape
    co, ci, k, k2 = w.data.shape
    if ci != c or k != k2:
        raise AutodiffError(f"conv2d shape mismatch: x {x.data.shape} vs w {w.data.shape}")
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    # (b, ho*wo, c*k*k) @ (c*k*k, co)
    cols2 = cols.transpose(0, 2, 1, 3).reshape(b, ho * wo, c * k * k)
    wmat = w.data.reshape(co, c * k * k).T
    out_data = (cols2 @ wmat).transpose(0, 2, 1).reshape(b, co, ho, wo)
    if bias is not None:
        bias = _as_tensor(bias)
        out_data = out_data + bias.data.reshape(1, co, 1, 1)
    out = Tensor(out_data)

    def backward(g):
        gmat = g.reshape(b, co, ho * wo).transpose(0, 2, 1)   # (b, ho*wo, co)
        gw = np.einsum("bpo,bpk->ok", gmat, cols2).reshape(w.data.shape)
        gcols2 = gmat @ wmat.T                                # (b, ho*wo, c*k*k)
        gx = np.zeros((b, c, h + 2 * padding, hh + 2 * padding))
        gcols = gcols2.reshape(b, ho * wo, c, k * k).transpose(0, 2, 1, 3)
        for i in range(ho):
            for j in range(wo):
                patch = gcols[:, :, i * wo + j, :].reshape(b, c, k, k)
                gx[:, :, i * stride:i * stride + k, j * stride:j * stride + k] += patch
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, w, bias) if bias is not None else (x, w)
    return _record(out, inputs, backward)


def batch_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-channel affine normalization over the batch (channel = axis 1
    for 4D input, last axis for 2D). Statistics come from the batch itself."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim == 4:
        axes = (0, 2, 3)
        shape = (1, -1, 1, 1)
    elif x.data.ndim == 2:
        axes = (0,)
        shape = (1, -1)
    else:
        raise AutodiffError("batch_norm expects 2D or 4D input")
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data.reshape(shape) + beta.data.reshape(shape))
    n = x.data.size // gamma.data.size

    def backward(g):
        gr = gamma.data.reshape(shape)
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gr
        gx = (inv / n) * (n * gxhat
                          - gxhat.sum(axis=axes, keepdims=True)
                          - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward)


def bilinear_sample(feat, coords: np.ndarray) -> Tensor:
    """Sample (C, H, W) feature maps at float pixel coords (n, 2) given as
    (row, col); border-clamped. Gradients flow to the feature maps only --
    sample locations are treated as constants."""
    feat = _as_tensor(feat)
    c, h, w = feat.data.shape
    rows = np.clip(coords[:, 0], 0.0, h - 1.0)
    cols = np.clip(coords[:, 1], 0.0, w - 1.0)
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = rows - r0
    fc = cols - c0
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    out = Tensor((feat.data[:, r0, c0] * w00 + feat.data[:, r0, c1] * w01 +
                  feat.data[:, r1, c0] * w10 + feat.data[:, r1, c1] * w11).T)

    def backward(g):
        gf = np.zeros_like(feat.data)
        gt = g.T  # (C, n)
        for wgt, rr, cc in ((w00, r0, c0), (w01, r0, c1), (w10, r1, c0), (w11, r1, c1)):
            np.add.at(gf.transpose(1, 2, 0), (rr, cc), (gt * wgt).T)
        return (gf,)

    return _record(out, (feat,), backward)


def chamfer_loss(pred, target: np.ndarray) -> Tensor:
    """Two-direction sum-of-squared nearest-neighbor Chamfer between a
    predicted point set (n, 3) and a fixed target cloud. Gradients flow to
    the predicted points through the (locally constant) matching."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if len(target) == 0:
        raise AutodiffError("chamfer_loss: empty target")
    p = pred.data
    tree_t = cKDTree(target)
    _, idx_pt = tree_t.query(p, k=1)
    tree_p = cKDTree(p)
    _, idx_tp = tree_p.query(target, k=1)
    d1 = p - target[idx_pt]
    d2 = target - p[idx_tp]
    out = Tensor(np.array((d1 * d1).sum() + (d2 * d2).sum()))

    def backward(g):
        gp = 2.0 * d1
        np.add.at(gp, idx_tp, -2.0 * d2)
        return (gp * np.asarray(g).reshape(-1)[0],)

    return _record(out, (pred,), backward)


class AdamState:
    """Adam optimizer state over a named parameter collection."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        """One Adam update with bias correction; aborts on NaN gradients."""
        self.step_count += 1
        if self.clip_norm is not None:
            total = 0.0
            for p in self.params.values():
                if p.grad is not None:
                    total += float((p.grad * p.grad).sum())
            scale = self.clip_norm / max(math.sqrt(total), self.clip_norm)
            if scale < 1.0:
                for p in self.params.values():
                    if p.grad is not None:
                        p.grad = p.grad * scale
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise AutodiffError(f"non-finite gradient for parameter {k!r}")
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
