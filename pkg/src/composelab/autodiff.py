"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is recorded eagerly: every op stores its parents and a backward
closure on the output tensor, and ``backward()`` replays the tape in reverse
topological order, visiting each node exactly once. Gradients accumulate
(sum) into ``requires_grad`` leaves; call ``zero_grad`` between optimizer
steps.

Everything is float64. Broadcasting is restricted to scalar-vs-tensor for
the elementwise ops; shaped broadcasting happens only through the explicit
``bias_add`` / ``expand`` ops so gradient routing stays obvious.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling, data generation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float64 array, optionally tracked by the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # backward closures hand over freshly computed buffers (or read-only
        # views), and nothing in this module mutates a grad in place, so the
        # first contribution is adopted without copying
        if self.grad is None:
            self.grad = g if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate gradients of everything this scalar depends on.

        Topological order over the recorded parents guarantees each node's
        backward closure runs exactly once, after all its downstream
        consumers have deposited their contribution.
        """
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; all routing goes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# creation

def create(shape: Sequence[int], init: str = "zeros", seed: int | None = None,
           requires_grad: bool = False) -> Tensor:
    """Create a tensor. ``init`` is one of zeros | ones | normal."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"extents must be positive, got {shape}")
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "ones":
        data = np.ones(shape)
    elif init == "normal":
        if seed is None:
            raise ValueError("normal init requires a seed")
        data = np.random.Generator(np.random.PCG64(seed)).standard_normal(shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return create(shape, "zeros", requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return create(shape, "ones", requires_grad=requires_grad)


def normal(shape, seed: int, requires_grad: bool = False) -> Tensor:
    return create(shape, "normal", seed=seed, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise

def _binary_shapes_ok(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ValueError(f"shape mismatch {a.shape} vs {b.shape} "
                     "(only scalar-vs-tensor broadcast is supported)")


def _unbroadcast_scalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar operand receives the sum of the elementwise gradient
    if t.ndim == 0 and g.ndim != 0:
        return g.sum()
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes_ok(a, b)

    def bwd(g):
        a._accumulate(_unbroadcast_scalar(g, a))
        b._accumulate(_unbroadcast_scalar(g, b))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes_ok(a, b)

    def bwd(g):
        a._accumulate(_unbroadcast_scalar(g, a))
        b._accumulate(_unbroadcast_scalar(-g, b))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes_ok(a, b)

    def bwd(g):
        a._accumulate(_unbroadcast_scalar(g * b.data, a))
        b._accumulate(_unbroadcast_scalar(g * a.data, b))

    return _make(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    """Pointwise division; raw division by exact zero raises.

    Callers that need an epsilon policy add their epsilon explicitly.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes_ok(a, b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("division by exact zero")
    inv = 1.0 / b.data

    def bwd(g):
        a._accumulate(_unbroadcast_scalar(g * inv, a))
        b._accumulate(_unbroadcast_scalar(-g * a.data * inv * inv, b))

    return _make(a.data * inv, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def bwd(g):
        a._accumulate(g * s)

    return _make(a.data * s, (a,), bwd)


def silu(a) -> Tensor:
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bwd(g):
        a._accumulate(g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise ValueError("sqrt of negative value")
    root = np.sqrt(a.data)

    def bwd(g):
        a._accumulate(g * (0.5 / root))

    return _make(root, (a,), bwd)


# ---------------------------------------------------------------------------
# matmul / softmax

def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b``.

    ``a`` is [..., m, k]; ``b`` is either [k, n] (shared right factor, the
    linear-layer case) or [..., k, n] with leading dims identical to ``a``'s.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"leading extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.ndim == 2:
            k, n = b.shape
            gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        b._accumulate(gb)

    return _make(out, (a, b), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    y = a.data - np.max(a.data, axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= np.sum(y, axis=axis, keepdims=True)

    def bwd(g):
        gy = g * y
        gy -= y * np.sum(gy, axis=axis, keepdims=True)
        a._accumulate(gy)

    return _make(y, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions

def reduce(op: str, a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Reduce along ``axis`` (or everything when None).

    max/min route the gradient to the winning element only; ties break to
    the lowest flat index, matching ``np.argmax``.
    """
    a = _as_tensor(a)
    if a.size == 0:
        raise ValueError("reduction over empty tensor")
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for shape {a.shape}")

    if op == "sum":
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

    elif op == "mean":
        out = a.data.mean(axis=axis, keepdims=keepdims)
        n = a.size if axis is None else a.shape[axis]

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape) / n)

    elif op in ("max", "min"):
        fn = np.max if op == "max" else np.min
        argfn = np.argmax if op == "max" else np.argmin
        out = fn(a.data, axis=axis, keepdims=keepdims)
        if axis is None:
            flat_idx = int(argfn(a.data))

            def bwd(g):
                buf = np.zeros(a.shape)
                buf.flat[flat_idx] = np.asarray(g).reshape(())
                a._accumulate(buf)

        else:
            win = argfn(a.data, axis=axis)

            def bwd(g):
                if not keepdims:
                    g = np.expand_dims(g, axis)
                buf = np.zeros(a.shape)
                np.put_along_axis(buf, np.expand_dims(win, axis), g, axis)
                a._accumulate(buf)

    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _make(out, (a,), bwd)


def rsum(a, axis=None, keepdims=False) -> Tensor:
    return reduce("sum", a, axis, keepdims)


def rmean(a, axis=None, keepdims=False) -> Tensor:
    return reduce("mean", a, axis, keepdims)


def rmax(a, axis=None, keepdims=False) -> Tensor:
    return reduce("max", a, axis, keepdims)


def rmin(a, axis=None, keepdims=False) -> Tensor:
    return reduce("min", a, axis, keepdims)


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def bwd(g):
        a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        a._accumulate(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), bwd)


def expand(a, axis: int, n: int) -> Tensor:
    """Insert a new axis of length ``n`` by repetition; backward sums it out."""
    a = _as_tensor(a)
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)

    def bwd(g):
        a._accumulate(g.sum(axis=axis))

    return _make(out, (a,), bwd)


def bias_add(x, b) -> Tensor:
    """Add a vector ``b`` along the last axis of ``x``."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"bias shape {b.shape} does not match {x.shape}")

    def bwd(g):
        x._accumulate(g)
        b._accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), bwd)


def take(a, index: int, axis: int) -> Tensor:
    """Select one index along ``axis`` (the axis is dropped)."""
    a = _as_tensor(a)
    index = int(index)
    if not 0 <= index < a.shape[axis]:
        raise IndexError(f"index {index} out of range for axis {axis} of {a.shape}")
    out = np.take(a.data, index, axis=axis)

    def bwd(g):
        buf = np.zeros(a.shape)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        buf[tuple(sl)] = g
        a._accumulate(buf)

    return _make(out, (a,), bwd)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return _make(out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# fixed-kernel smoothing convolution

def conv2d_fixed(x, kernel) -> Tensor:
    """Same-size 2-D correlation with a constant odd-sized kernel.

    Replicate padding keeps border responses at full strength (no implicit
    zero halo). The kernel never receives gradient; gradient flows into
    ``x`` only.
    """
    x = _as_tensor(x)
    k = kernel.data if isinstance(kernel, Tensor) else np.asarray(kernel, dtype=np.float64)
    if x.ndim != 2 or k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError("conv2d_fixed expects a 2-D input and square kernel")
    ksize = k.shape[0]
    if ksize % 2 == 0:
        raise ValueError("kernel size must be odd")
    r = ksize // 2
    h, w = x.shape
    padded = np.pad(x.data, r, mode="edge")
    out = np.zeros((h, w))
    for u in range(ksize):
        for v in range(ksize):
            out += k[u, v] * padded[u:u + h, v:v + w]

    def bwd(g):
        dp = np.zeros((h + 2 * r, w + 2 * r))
        for u in range(ksize):
            for v in range(ksize):
                dp[u:u + h, v:v + w] += k[u, v] * g
        # fold the replicate-pad halo back onto the border pixels
        ii = np.clip(np.arange(h + 2 * r) - r, 0, h - 1)
        jj = np.clip(np.arange(w + 2 * r) - r, 0, w - 1)
        dx = np.zeros((h, w))
        np.add.at(dx, (ii[:, None], jj[None, :]), dp)
        x._accumulate(dx)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# verification

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      step: float = 1e-5) -> float:
    """Max relative error between analytic gradient and central differences.

    The denominator is floored at 1e-4 so near-zero gradient entries are
    compared absolutely rather than inflating the ratio.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    loss = f(probe)
    loss.backward()
    analytic = probe.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.copy().reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        with no_grad():
            hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - step
        with no_grad():
            lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float(np.max(np.abs(analytic - numeric) / denom))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    """Per-parameter Adam moments keyed like the parameter mapping."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              grads: dict[str, np.ndarray] | None = None) -> dict[str, Tensor]:
    """One bias-corrected Adam update, in place on the parameter data.

    ``grads`` defaults to the tensors' accumulated ``.grad``; parameters with
    no gradient are skipped. A NaN gradient raises rather than corrupting
    the moments.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if np.any(np.isnan(g)):
            raise FloatingPointError(f"NaN gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
