"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray plus a gradient slot and a backward
closure; ops build a tape implicitly through parent links.  Only the
operations the two models in this package need are provided.  Gradients
are accumulated into leaf :class:`Parameter` objects until explicitly
cleared, mirroring the usual train-step pattern.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that stops tape construction (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "parents", "requires_grad", "_backward")

    def __init__(self, data, parents=(), requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.requires_grad = requires_grad
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'})"

    # -- graph traversal ---------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar: fills .grad on every reachable node."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited = {id(self)}
        stack: list[tuple[Tensor, object]] = [(self, iter(self.parents))]
        while stack:
            node, it = stack[-1]
            advanced = False
            for p in it:
                if p.requires_grad and id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, iter(p.parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()
        for node in topo:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division not supported; multiply by a reciprocal")
        return mul(self, _wrap(1.0 / other))


class Parameter(Tensor):
    """Trainable leaf tensor with a unique name inside its model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.asarray(data), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(data, parents) -> Tensor:
    if not _grad_enabled:
        return Tensor(data)
    req = any(p.requires_grad for p in parents)
    live = tuple(p for p in parents if p.requires_grad)
    return Tensor(data, parents=live, requires_grad=req)


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad, b.data.shape)
        out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = _node(-a.data, (a,))
    if out.requires_grad:
        def _bw():
            a.grad += -out.grad
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data * b.data, (a, b))
    if out.requires_grad:
        a_data, b_data = a.data, b.data
        def _bw():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad * b_data, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad * a_data, b.data.shape)
        out._backward = _bw
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _node(y, (a,))
    if out.requires_grad:
        def _bw():
            a.grad += (1.0 - y * y) * out.grad
        out._backward = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    y[~pos] = e / (1.0 + e)
    out = _node(y, (a,))
    if out.requires_grad:
        def _bw():
            a.grad += y * (1.0 - y) * out.grad
        out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)
    out = _node(y, (a,))
    if out.requires_grad:
        mask = a.data > 0
        def _bw():
            a.grad += mask * out.grad
        out._backward = _bw
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = _node(y, (a,))
    if out.requires_grad:
        def _bw():
            a.grad += y * out.grad
        out._backward = _bw
    return out


def log(a: Tensor) -> Tensor:
    out = _node(np.log(a.data), (a,))
    if out.requires_grad:
        def _bw():
            a.grad += out.grad / a.data
        out._backward = _bw
    return out


# -- reductions and shape ----------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if not keepdims and axis is not None:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.data.shape)
        out._backward = _bw
    return out


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = _node(a.data.reshape(shape), (a,))
    if out.requires_grad:
        def _bw():
            a.grad += out.grad.reshape(a.data.shape)
        out._backward = _bw
    return out


def transpose(a: Tensor, axes) -> Tensor:
    out = _node(a.data.transpose(axes), (a,))
    if out.requires_grad:
        inv = np.argsort(axes)
        def _bw():
            a.grad += out.grad.transpose(inv)
        out._backward = _bw
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def _bw():
            pieces = np.split(out.grad, splits, axis=axis)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    t.grad += g
        out._backward = _bw
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        def _bw():
            pieces = np.moveaxis(out.grad, axis, 0)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    t.grad += g
        out._backward = _bw
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = _node(a.data[index], (a,))
    if out.requires_grad:
        def _bw():
            a.grad[index] += out.grad
        out._backward = _bw
    return out


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not (a.data.ndim == b.data.ndim and a.data.ndim in (2, 3)) and not (
        a.data.ndim == 2 and b.data.ndim == 2
    ):
        raise ValueError(
            f"matmul supports 2Dx2D or equal-batch 3Dx3D, got {a.data.shape} @ {b.data.shape}"
        )
    out = _node(np.matmul(a.data, b.data), (a, b))
    if out.requires_grad:
        a_data, b_data = a.data, b.data
        def _bw():
            if a.requires_grad:
                a.grad += np.matmul(out.grad, b_data.swapaxes(-1, -2))
            if b.requires_grad:
                b.grad += np.matmul(a_data.swapaxes(-1, -2), out.grad)
        out._backward = _bw
    return out


# -- nonlinear blocks ----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along one axis (max subtracted for stability)."""
    if a.data.size == 0:
        raise ValueError("softmax of an empty tensor")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            a.grad += y * (g - dot)
        out._backward = _bw
    return out


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row negative log-likelihood of integer targets under softmax(logits).

    logits: (N, V); targets: int array (N,).  Returns (N,).  Fused for
    numerical stability: works directly on shifted logits.
    """
    targets = np.asarray(targets)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    nll = (lse[:, 0] - z[rows, targets])
    out = _node(nll, (logits,))
    if out.requires_grad:
        def _bw():
            p = np.exp(z - lse)
            p[rows, targets] -= 1.0
            logits.grad += p * out.grad[:, None]
        out._backward = _bw
    return out


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: (…) int ids against a (V, d) table -> (…, d)."""
    ids = np.asarray(ids)
    out = _node(weight.data[ids], (weight,))
    if out.requires_grad:
        d = weight.data.shape[1]
        def _bw():
            np.add.at(weight.grad, ids.reshape(-1), out.grad.reshape(-1, d))
        out._backward = _bw
    return out


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate) so inference is identity."""
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(mask.astype(a.data.dtype)))


# -- convolution and pooling ---------------------------------------------------


def conv2d_valid(x: Tensor, w: Tensor) -> Tensor:
    """Valid 2-D convolution: x (B, C, H, W) with kernels w (K, C, kh, kw)."""
    B, C, H, W = x.data.shape
    K, C2, kh, kw = w.data.shape
    if C != C2:
        raise ValueError(f"channel mismatch: input {C} vs kernel {C2}")
    if H < kh or W < kw:
        raise ValueError(f"input {H}x{W} smaller than kernel {kh}x{kw}")
    oh, ow = H - kh + 1, W - kw + 1
    sB, sC, sH, sW = x.data.strides
    view = np.lib.stride_tricks.as_strided(
        x.data, shape=(B, C, oh, ow, kh, kw), strides=(sB, sC, sH, sW, sH, sW)
    )
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(B, oh * ow, C * kh * kw)
    wmat = w.data.reshape(K, C * kh * kw)
    y = np.matmul(cols, wmat.T)                      # (B, oh*ow, K)
    out = _node(y.transpose(0, 2, 1).reshape(B, K, oh, ow), (x, w))
    if out.requires_grad:
        def _bw():
            g = out.grad.reshape(B, K, oh * ow).transpose(0, 2, 1)   # (B, oh*ow, K)
            if w.requires_grad:
                dw = np.einsum("bpk,bpc->kc", g, cols)
                w.grad += dw.reshape(K, C, kh, kw)
            if x.requires_grad:
                gcols = np.matmul(g, wmat).reshape(B, oh, ow, C, kh, kw)
                gx = np.zeros_like(x.data)
                for s in range(kh):
                    for t in range(kw):
                        gx[:, :, s:s + oh, t:t + ow] += gcols[:, :, :, :, s, t].transpose(0, 3, 1, 2)
                x.grad += gx
        out._backward = _bw
    return out


def max_pool2d(x: Tensor, ph: int, pw: int) -> Tensor:
    """Non-overlapping (ph, pw) max pooling; trailing remainder rows/cols dropped.

    Gradient routes to the first maximal element of each window.
    """
    B, C, H, W = x.data.shape
    nh, nw = H // ph, W // pw
    if nh == 0 or nw == 0:
        raise ValueError(f"input {H}x{W} smaller than pooling window {ph}x{pw}")
    cropped = x.data[:, :, : nh * ph, : nw * pw]
    windows = cropped.reshape(B, C, nh, ph, nw, pw).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(B, C, nh, nw, ph * pw)
    out = _node(flat.max(axis=-1), (x,))
    if out.requires_grad:
        idx = flat.argmax(axis=-1)
        def _bw():
            gwin = np.zeros_like(flat)
            np.put_along_axis(gwin, idx[..., None], out.grad[..., None], axis=-1)
            gfull = np.zeros_like(x.data)
            gfull[:, :, : nh * ph, : nw * pw] = (
                gwin.reshape(B, C, nh, nw, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(
                    B, C, nh * ph, nw * pw
                )
            )
            x.grad += gfull
        out._backward = _bw
    return out
