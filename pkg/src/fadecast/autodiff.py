"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records its parents and a backward closure on a tape built
on the fly; `Tensor.backward()` replays the tape in reverse topological
order. The kernel set is intentionally small: dense layers, valid 1D
cross-correlation, max-pooling, the activations used by the networks in
this package, and the reductions needed by their losses. All gradients are
exact for the discrete forward computation and are verified against central
finite differences by `grad_check`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Array node of the computation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @classmethod
    def _op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ValidationError("backward() without a seed requires a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64).reshape(self.data.shape)
        # Iterative DFS: tapes from recorded ODE integrations get long.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(seed)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


class Parameter(Tensor):
    """A named leaf tensor that always participates in gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._op(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor._op(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._op(data, (a, b), backward)


def add_scaled(y, x, alpha: float) -> Tensor:
    """y + alpha * x as a single fused node (hot path in RK stages)."""
    y, x = constant(y), constant(x)
    data = y.data + alpha * x.data

    def backward(g):
        if y.requires_grad:
            y._accumulate(_unbroadcast(g, y.data.shape))
        if x.requires_grad:
            x._accumulate(_unbroadcast(alpha * g, x.data.shape))

    return Tensor._op(data, (y, x), backward)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    ad, bd = a.data, b.data
    if ad.ndim > 2 or bd.ndim > 2:
        raise ValidationError(f"matmul supports 1D/2D operands, got {ad.ndim}D @ {bd.ndim}D")
    data = ad @ bd

    def backward(g):
        if ad.ndim == 2 and bd.ndim == 1:
            if a.requires_grad:
                a._accumulate(np.outer(g, bd))
            if b.requires_grad:
                b._accumulate(ad.T @ g)
        elif ad.ndim == 2 and bd.ndim == 2:
            if a.requires_grad:
                a._accumulate(g @ bd.T)
            if b.requires_grad:
                b._accumulate(ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:
            if a.requires_grad:
                a._accumulate(bd @ g)
            if b.requires_grad:
                b._accumulate(np.outer(ad, g))
        else:  # 1D @ 1D dot product
            if a.requires_grad:
                a._accumulate(g * bd)
            if b.requires_grad:
                b._accumulate(g * ad)

    return Tensor._op(data, (a, b), backward)


def dense(x, weights, bias) -> Tensor:
    """weights @ x + bias with weights shaped (out, in)."""
    return add(matmul(weights, x), bias)


# -- activations ----------------------------------------------------------

def tanh(x) -> Tensor:
    x = constant(x)
    data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - data * data))

    return Tensor._op(data, (x,), backward)


def relu(x) -> Tensor:
    x = constant(x)
    # Subgradient at exactly 0 is defined as 0.
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return Tensor._op(data, (x,), backward)


def softplus(x) -> Tensor:
    x = constant(x)
    data = np.logaddexp(0.0, x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g / (1.0 + np.exp(-x.data)))

    return Tensor._op(data, (x,), backward)


def softmax(x) -> Tensor:
    """Numerically stabilized softmax of a 1D vector."""
    x = constant(x)
    if x.data.ndim != 1:
        raise ValidationError(f"softmax expects a vector, got shape {x.data.shape}")
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    data = e / e.sum()

    def backward(g):
        if x.requires_grad:
            x._accumulate(data * (g - np.dot(g, data)))

    return Tensor._op(data, (x,), backward)


# -- convolution / pooling --------------------------------------------------

def conv1d(x, weights, bias) -> Tensor:
    """Valid cross-correlation: (C_in, L) * (C_out, C_in, K) + (C_out,)."""
    x, weights, bias = constant(x), constant(weights), constant(bias)
    xd, wd, bd = x.data, weights.data, bias.data
    if xd.ndim != 2:
        raise ValidationError(f"conv1d input must be (C_in, L), got shape {xd.shape}")
    if wd.ndim != 3:
        raise ValidationError(f"conv1d weights must be (C_out, C_in, K), got shape {wd.shape}")
    c_in, length = xd.shape
    c_out, w_cin, k = wd.shape
    if w_cin != c_in:
        raise ValidationError(f"conv1d channel mismatch: input C_in={c_in}, weights C_in={w_cin}")
    if bd.shape != (c_out,):
        raise ValidationError(f"conv1d bias must have shape ({c_out},), got {bd.shape}")
    if length < k:
        raise ValidationError(f"conv1d input length {length} shorter than kernel {k}")
    l_out = length - k + 1
    data = np.broadcast_to(bd[:, None], (c_out, l_out)).copy()
    for kk in range(k):
        data += wd[:, :, kk] @ xd[:, kk:kk + l_out]

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=1))
        if x.requires_grad:
            dx = np.zeros_like(xd)
            for kk in range(k):
                dx[:, kk:kk + l_out] += wd[:, :, kk].T @ g
            x._accumulate(dx)
        if weights.requires_grad:
            dw = np.empty_like(wd)
            for kk in range(k):
                dw[:, :, kk] = g @ xd[:, kk:kk + l_out].T
            weights._accumulate(dw)

    return Tensor._op(data, (x, weights, bias), backward)


def maxpool1d(x, window: int = 2) -> Tensor:
    """Non-overlapping max pooling, stride == window, odd tail dropped."""
    x = constant(x)
    xd = x.data
    if xd.ndim != 2:
        raise ValidationError(f"maxpool1d input must be (C, L), got shape {xd.shape}")
    c, length = xd.shape
    if length < window:
        raise ValidationError(f"maxpool1d input length {length} shorter than window {window}")
    l_out = length // window
    blocks = xd[:, :l_out * window].reshape(c, l_out, window)
    # argmax returns the first maximum, which is the tie convention here
    arg = blocks.argmax(axis=2)
    data = np.take_along_axis(blocks, arg[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        if x.requires_grad:
            dx = np.zeros_like(xd)
            cols = np.arange(l_out)[None, :] * window + arg
            rows = np.arange(c)[:, None]
            np.add.at(dx, (rows, cols), g)
            x._accumulate(dx)

    return Tensor._op(data, (x,), backward)


# -- shape / reductions ------------------------------------------------------

def transpose(x) -> Tensor:
    x = constant(x)
    if x.data.ndim != 2:
        raise ValidationError(f"transpose expects a 2D tensor, got shape {x.data.shape}")
    data = x.data.T

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.T)

    return Tensor._op(data, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = constant(x)
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return Tensor._op(data, (x,), backward)


def getitem(x, key) -> Tensor:
    x = constant(x)
    data = x.data[key]
    if np.isscalar(data):
        data = np.asarray(data)

    def backward(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.add.at(dx, key, g)
            x._accumulate(dx)

    return Tensor._op(data, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, extent in zip(tensors, extents):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + extent)
                t._accumulate(g[tuple(sl)])
            offset += extent

    return Tensor._op(data, tuple(tensors), backward)


def stack(tensors) -> Tensor:
    """Stack 1D tensors into rows of a 2D tensor."""
    tensors = [constant(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=0)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(g[i])

    return Tensor._op(data, tuple(tensors), backward)


def tsum(x) -> Tensor:
    x = constant(x)
    data = np.asarray(x.data.sum())

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return Tensor._op(data, (x,), backward)


def tmean(x) -> Tensor:
    x = constant(x)
    data = np.asarray(x.data.mean())
    n = x.data.size

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g / n, x.data.shape).copy())

    return Tensor._op(data, (x,), backward)


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    """Worst-case comparison of tape gradients to central differences."""

    max_rel_err: float
    worst_location: tuple[str, int] | None
    n_checked: int
    failures: list[str] = field(default_factory=list)

    def __str__(self):
        loc = "-" if self.worst_location is None else f"{self.worst_location[0]}[{self.worst_location[1]}]"
        return f"grad_check: max rel err {self.max_rel_err:.3e} at {loc} ({self.n_checked} coords)"


def grad_check(fn, wrt, step: float = 1e-5, rel_floor: float = 1e-4,
               sample: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``fn`` is a zero-argument callable that rebuilds a scalar Tensor from the
    ``wrt`` leaves, so the leaves can be perturbed in place between calls.
    When ``sample`` is given, only that many randomly chosen coordinates per
    tensor are probed (the tape gradient is always computed in full).
    """
    out = fn()
    if out.data.size != 1:
        raise ValidationError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data):
        raise NumericalError("grad_check: non-finite value at the unperturbed point")
    for t in wrt:
        t.grad = None
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    max_err = 0.0
    worst = None
    n_checked = 0
    failures: list[str] = []
    for ti, (t, ana) in enumerate(zip(wrt, analytic)):
        name = t.name if isinstance(t, Parameter) else f"input{ti}"
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        coords = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=sample, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().data)
            flat[i] = orig - step
            f_minus = float(fn().data)
            flat[i] = orig
            n_checked += 1
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                failures.append(f"non-finite value while perturbing {name}[{i}]")
                max_err = np.inf
                worst = (name, int(i))
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = ana_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
            if err > max_err:
                max_err = err
                worst = (name, int(i))
    return GradCheckReport(max_err, worst, n_checked, failures)


# -- optimizers -----------------------------------------------------------------

class Adam:
    """Per-parameter adaptive-moment gradient descent with bias correction."""

    def __init__(self, params, learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self._t += 1
        b1t = 1.0 - self.beta1 ** self._t
        b2t = 1.0 - self.beta2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.learning_rate * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


class Sgd:
    """Plain gradient descent, theta <- theta - lr * grad (online updates)."""

    def __init__(self, params, learning_rate: float):
        self.params = list(params)
        self.learning_rate = learning_rate

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.learning_rate * p.grad
