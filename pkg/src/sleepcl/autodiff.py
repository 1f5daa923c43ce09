"""Small define-by-run reverse-mode autodiff engine on top of numpy.

Every differentiable op builds a new :class:`Tensor` that remembers its
parents and a closure that pushes the output gradient back to them.
:func:`backward` walks the recorded graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class AutodiffError(Exception):
    """Base class for engine errors."""


class DimensionError(AutodiffError, ValueError):
    pass


class NumericDomainError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class GraphError(AutodiffError, RuntimeError):
    pass


_state = {"dtype": np.dtype(np.float32), "grad_enabled": True, "check_finite": True}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (frozen modules, evaluation)."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def finite_checks(enabled: bool):
    old = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = old


class Tensor:
    """Dense array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating) or _op == "leaf":
            arr = arr.astype(_state["dtype"], copy=False)
        if _state["check_finite"] and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by '{_op}' (shape {arr.shape})")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op
        self._consumed = False

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, dtype=data.dtype, _parents=tuple(parents) if track else (), _op=op)
    if track:
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def scale(a: Tensor, alpha: float) -> Tensor:
    a = as_tensor(a)
    alpha = float(alpha)

    def bw(g):
        _accum(a, g * alpha)

    return _make(a.data * a.data.dtype.type(alpha), (a,), "scale", bw)


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, 2.0 * g * a.data)

    return _make(a.data * a.data, (a,), "square", bw)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _make(out, (a,), "exp", bw)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NumericDomainError(f"log of non-positive value (min {a.data.min()!r})")

    def bw(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), "log", bw)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), "relu", bw)


# -- reductions ------------------------------------------------------------------
def sum_(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), "sum", bw)


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(a.data.mean(axis=axis)), (a,), "mean", bw)


# -- shape ops -------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, (a,), "reshape", bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), "transpose", bw)


# -- linear algebra ----------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def im2col(x: Tensor, stride: int = 1, padding: int = 1, k: int = 3) -> Tensor:
    """Expand (B, C, H, W) into patch rows of shape (B*Ho*Wo, C*k*k)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"im2col: expected 4-d input, got shape {x.shape}")
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)

    def bw(g):
        gw = g.reshape(B, Ho, Wo, C, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gw[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        _accum(x, gxp[:, :, padding:padding + H, padding:padding + W])

    return _make(np.ascontiguousarray(cols), (x,), "im2col", bw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """3x3 cross-correlation with padding 1, built from im2col + matmul."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding != 1:
        raise ValueError("conv2d: padding is fixed at 1")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernel must be (C_out, C_in, 3, 3), got {kernel.shape}")
    if x.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} has wrong channel count for kernel {kernel.shape}")
    B, _, H, W = x.shape
    c_out = kernel.shape[0]
    Ho = (H + 2 * padding - 3) // stride + 1
    Wo = (W + 2 * padding - 3) // stride + 1
    cols = im2col(x, stride, padding)
    kmat = transpose(reshape(kernel, (c_out, -1)), (1, 0))
    out = matmul(cols, kmat)
    return transpose(reshape(out, (B, Ho, Wo, c_out)), (0, 3, 1, 2))


# -- softmax family ----------------------------------------------------------------
def _check_mask(mask, n: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise DimensionError(f"class mask has shape {mask.shape}, expected ({n},)")
    if not mask.any():
        raise ValueError("class mask selects no classes")
    return mask


def _masked_log_softmax(z: np.ndarray, mask: Optional[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Returns (log-probs with masked entries 0, probs with masked entries 0)."""
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    with np.errstate(invalid="ignore"):
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    probs = np.exp(logp)
    if mask is not None:
        logp = np.where(mask, logp, 0.0).astype(z.dtype)
    return logp, probs


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; masked-out classes get exactly zero mass."""
    x = as_tensor(x)
    mask = _check_mask(mask, x.shape[-1])
    _, p = _masked_log_softmax(x.data, mask)

    def bw(g):
        _accum(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (x,), "softmax", bw)


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    logp, p = _masked_log_softmax(x.data, None)

    def bw(g):
        _accum(x, g - p * g.sum(axis=-1, keepdims=True))

    return _make(logp, (x,), "log_softmax", bw)


def cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer labels, softmax restricted to ``mask``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    mask = _check_mask(mask, K)
    if labels.shape != (B,):
        raise DimensionError(f"cross_entropy: {labels.shape} labels for {B} rows")
    if mask is not None and not mask[labels].all():
        raise ValueError("cross_entropy: label outside the active class mask")
    logp, p = _masked_log_softmax(logits.data, mask)
    loss = -logp[np.arange(B), labels].mean()

    def bw(g):
        d = p.copy()
        d[np.arange(B), labels] -= 1.0
        _accum(logits, d * (g / B))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", bw)


def soft_cross_entropy(logits: Tensor, targets, mask=None, temperature: float = 1.0) -> Tensor:
    """Distillation loss: mean over rows of -sum(t * log softmax(logits / T)), times T^2.

    ``targets`` are the teacher's temperature-softened distributions.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"soft_cross_entropy: targets {t.shape} vs logits {logits.shape}")
    B, K = logits.shape
    mask = _check_mask(mask, K)
    if mask is not None and (t[:, ~mask] != 0).any():
        raise ValueError("soft_cross_entropy: target mass on masked classes")
    T = float(temperature)
    logp, p = _masked_log_softmax(logits.data / T, mask)
    loss = -(t * logp).sum(axis=-1).mean() * T * T

    def bw(g):
        # d/dz of -T^2 sum t log softmax(z/T) = T (p - t) when t sums to 1
        _accum(logits, (p * t.sum(axis=-1, keepdims=True) - t) * (g * T / B))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "soft_cross_entropy", bw)


# -- VAE ---------------------------------------------------------------------------
def gaussian_sample(mu: Tensor, log_var: Tensor, noise) -> Tensor:
    """Reparameterised draw mu + exp(log_var / 2) * noise with external noise."""
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    eps = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=mu.dtype)
    if not (mu.shape == log_var.shape == eps.shape):
        raise DimensionError(f"gaussian_sample: shapes {mu.shape}, {log_var.shape}, {eps.shape} differ")
    std = np.exp(0.5 * log_var.data)

    def bw(g):
        _accum(mu, g)
        _accum(log_var, g * 0.5 * std * eps)

    return _make(mu.data + std * eps, (mu, log_var), "gaussian_sample", bw)


# -- backward ------------------------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` of every trainable leaf reachable from scalar ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. Leaves listed in
    ``inputs`` that are not reachable receive a zero gradient.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    if _state["check_finite"] and not np.isfinite(loss.data).all():
        raise NonFiniteError(f"loss is not finite: {loss.data!r}")
    order = _topo(loss)
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None
    for node in order:
        node._consumed = True
        node._backward = None
    if inputs is not None:
        for t in inputs:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


# -- finite-difference checking ----------------------------------------------------------
def numeric_grad(f: Callable[[], Tensor], t: Tensor, idx: Sequence[tuple], step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. chosen entries of ``t.data``."""
    out = np.empty(len(idx), dtype=np.float64)
    with no_grad():
        for n, ix in enumerate(idx):
            orig = t.data[ix]
            t.data[ix] = orig + step
            fp = f().item()
            t.data[ix] = orig - step
            fm = f().item()
            t.data[ix] = orig
            out[n] = (fp - fm) / (2 * step)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], max_entries: int = 20,
               step: float = 1e-5, rng: Optional[np.random.Generator] = None) -> list[float]:
    """Compare backward gradients of ``f`` with central differences.

    Returns one relative error per parameter, measured over up to
    ``max_entries`` randomly chosen coordinates of that parameter.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    backward(f(), inputs=params)
    errors = []
    for p in params:
        n = p.size
        flat = rng.choice(n, size=min(max_entries, n), replace=False)
        idx = [np.unravel_index(i, p.shape) for i in flat]
        analytic = np.array([p.grad[ix] for ix in idx])
        numeric = numeric_grad(f, p, idx, step)
        errors.append(relative_error(analytic, numeric))
    return errors
