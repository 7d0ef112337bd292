"""Dense tensors with reverse-mode differentiation.

A deliberately small kernel: float32 arrays (float64 available for gradient
verification), a creation-ordered tape, and exactly the operations needed to
run and train small convolutional / fully-connected spiking networks over
multiple timesteps. Reductions accumulate in float64 and cast back to the
storage dtype.

The spike nonlinearity has a hard forward (exact {0,1} output) paired with an
arctan surrogate derivative, plus a soft forward mode whose output is the
antiderivative of that surrogate, so finite differences stay meaningful when
checking gradients.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    `data` is always a C-contiguous numpy array (float32 unless an explicit
    dtype is given). Tensors produced by operations remember their parents and
    a backward closure; node ids increase with creation order, which makes
    creation order a valid topological order for the reverse pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse pass from a scalar node.

        Walks every recorded operation reachable from this node in reverse
        creation order; gradients accumulate into `.grad` of tensors with
        `requires_grad` set.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[Tensor] = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._id, reverse=True)
        self.grad = np.ones_like(self.data)
        for node in nodes:
            node._backward(node.grad)

    # operator sugar; scalars go through the fast constant paths
    def __add__(self, other):
        return shift(self, other) if isinstance(other, (int, float)) else add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, grad={'yes' if self.grad is not None else 'no'})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    dtype = g.dtype
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=np.float64)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True, dtype=np.float64)
    return g.astype(dtype, copy=False)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _result(-a.data, (a,), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def backward(g):
        a._accumulate(g * s)

    return _result(a.data * s, (a,), backward)


def shift(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def backward(g):
        a._accumulate(g)

    return _result(a.data + c, (a,), backward)


def pow_const(a: Tensor, p: float) -> Tensor:
    p_ = a.data.dtype.type(p)
    out = a.data ** p_

    def backward(g):
        a._accumulate(g * p_ * a.data ** (p_ - 1))

    return _result(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g / (2.0 * out))

    return _result(out, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _result(np.abs(a.data), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))

    return _result(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return _result(out.astype(a.data.dtype, copy=False), (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was in range."""
    out = np.clip(a.data, lo, hi)

    def backward(g):
        inside = (a.data >= lo) & (a.data <= hi)
        a._accumulate(g * inside)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _result(out, tuple(parts), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.data.dtype))

    return _result(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def sum_axes(a: Tensor, axes: tuple[int, ...], keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False).copy())

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: left is {tuple(a.shape)}, right is {tuple(b.shape)}"
        )
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(out, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b for x[batch, in], w[in, out], b[out]."""
    if b.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ValueError(f"bias shape {tuple(b.shape)} does not match weight {tuple(w.shape)}")
    return add(matmul(x, w), b)


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv2d output size is not an integer: input {n}, kernel {k}, "
            f"stride {stride}, padding {pad}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols, oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x_shape
    oh, ow = cols.shape[-2:]
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[batch,C,H,W] with kernels[K,C,kh,kw]."""
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise ValueError(
            f"conv2d shape mismatch: input {tuple(x.shape)}, kernels {tuple(kernels.shape)}"
        )
    b = x.shape[0]
    k, c, kh, kw = kernels.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    mat = cols.reshape(b, c * kh * kw, oh * ow)
    kmat = kernels.data.reshape(k, c * kh * kw)
    out = np.einsum("kp,bpl->bkl", kmat, mat, optimize=True).reshape(b, k, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)

    def backward(g):
        gmat = g.reshape(b, k, oh * ow)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.data.dtype))
        if kernels.requires_grad:
            gk = np.einsum("bkl,bpl->kp", gmat, mat, optimize=True)
            kernels._accumulate(gk.reshape(kernels.shape).astype(kernels.data.dtype, copy=False))
        if x.requires_grad:
            gcols = np.einsum("kp,bkl->bpl", kmat, gmat, optimize=True)
            gcols = gcols.reshape(b, c, kh, kw, oh, ow)
            x._accumulate(_col2im(gcols, x.shape, kh, kw, stride, padding))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out, parents, backward)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    b, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"avg_pool2d needs dims divisible by {size}, got {h}x{w}")
    oh, ow = h // size, w // size
    out = x.data.reshape(b, c, oh, size, ow, size).mean(axis=(3, 5), dtype=np.float64)
    out = out.astype(x.data.dtype)

    def backward(g):
        gx = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        x._accumulate(gx.astype(x.data.dtype, copy=False))

    return _result(out, (x,), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        b, c, h, w = g.shape
        gx = g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5), dtype=np.float64)
        x._accumulate(gx.astype(x.data.dtype, copy=False))

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# spike nonlinearity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurrogateSpec:
    """Shape of the spike function's gradient pathway.

    kind: only "arctan" is implemented.
    slope: steepness a of the surrogate; must be positive.
    mode: "hard" emits exact {0,1} spikes in the forward pass, "soft" emits
        the smoothed step (the arctan antiderivative), used for gradient
        verification where the hard step would make finite differences
        meaningless.
    """

    kind: str = "arctan"
    slope: float = 2.0
    mode: str = "hard"

    def __post_init__(self):
        if self.kind != "arctan":
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if self.slope <= 0:
            raise ValueError("surrogate slope must be positive")
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"surrogate mode must be 'hard' or 'soft', got {self.mode!r}")

    def soft(self) -> "SurrogateSpec":
        return SurrogateSpec(self.kind, self.slope, "soft")


def _surrogate_deriv(u: np.ndarray, slope: float) -> np.ndarray:
    a = u.dtype.type(slope)
    half_pi_a = u.dtype.type(math.pi * slope / 2.0)
    return (a / 2.0) / (1.0 + (half_pi_a * u) ** 2)


def spike(v: Tensor, v_thr: float, spec: SurrogateSpec) -> Tensor:
    """Threshold crossing with a surrogate gradient.

    hard mode forward: Heaviside(v - v_thr), exactly 0 or 1.
    soft mode forward: 1/2 + arctan(pi*a*(v - v_thr)/2)/pi, in (0, 1).
    Both modes backpropagate (a/2) / (1 + (pi*a*u/2)^2) at u = v - v_thr.
    """
    u = v.data - v.data.dtype.type(v_thr)
    if spec.mode == "hard":
        out = (u >= 0).astype(v.data.dtype)
    else:
        a = v.data.dtype.type(spec.slope)
        out = (0.5 + np.arctan(u * (np.pi * a / 2.0)) / np.pi).astype(v.data.dtype)

    def backward(g):
        v._accumulate(g * _surrogate_deriv(u, spec.slope))

    return _result(out, (v,), backward)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Fused log-softmax + negative log likelihood for integer labels."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be [batch, classes], got {tuple(logits.shape)}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(len(labels)), labels]
    if reduction == "mean":
        value = nll.mean()
        grad_scale = 1.0 / len(labels)
    elif reduction == "sum":
        value = nll.sum()
        grad_scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    softmax = np.exp(logp)

    def backward(g):
        gz = softmax.copy()
        gz[np.arange(len(labels)), labels] -= 1.0
        logits._accumulate((g * grad_scale * gz).astype(logits.data.dtype))

    return _result(np.asarray(value, dtype=logits.data.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# optimizer and gradient checking
# ---------------------------------------------------------------------------

class SGD:
    """Plain SGD with momentum: v <- momentum*v + grad; p <- p - lr*v."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"parameter {i} has no gradient; run backward() first")
            if self.momentum:
                self._velocity[i] = self.momentum * self._velocity[i] + p.grad
            else:
                self._velocity[i] = p.grad
            p.data -= p.data.dtype.type(self.lr) * self._velocity[i]
        self.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def grad_check(loss_fn, params: list[Tensor], epsilon: float = 1e-3,
               n_coords: int = 10, rng: np.random.Generator | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Samples `n_coords` coordinates across `params`, perturbs each by
    +/- epsilon and compares (f(p+e) - f(p-e)) / 2e against the gradient from
    one backward pass. The network behind `loss_fn` should be in soft-forward
    mode; hard spikes have no meaningful finite differences.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for _ in range(n_coords):
        pi = int(rng.integers(len(params)))
        p = params[pi]
        idx = np.unravel_index(int(rng.integers(p.size)), p.shape)
        orig = p.data[idx]
        with no_grad():
            p.data[idx] = orig + epsilon
            hi = float(loss_fn().data)
            p.data[idx] = orig - epsilon
            lo = float(loss_fn().data)
        p.data[idx] = orig
        fd = (hi - lo) / (2.0 * epsilon)
        ad = float(grads[pi][idx])
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)
        worst = max(worst, rel)
    for p in params:
        p.grad = None
    return worst
