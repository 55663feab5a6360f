"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every tensor receives a monotonically increasing ``node_id`` at creation, so
the inputs of any recorded operation always carry smaller ids than its
output. :func:`backward` collects the nodes reachable from a loss into a
:class:`Tape` (sorted by id, i.e. topologically) and replays it in reverse.

Operations accept a leading batch axis wherever the layer code needs one;
conv1d works on ``C x T`` or ``B x C x T`` inputs.
"""

from __future__ import annotations

import builtins
import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "is_grad_enabled",
    "create",
    "make_rng",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "clamp_min",
    "matmul",
    "transpose",
    "reshape",
    "conv1d",
    "reduce",
    "sum",
    "mean",
    "var",
    "softmax",
    "log_softmax",
    "concat",
    "split",
    "backward",
    "grad_check",
]

DTYPE = np.float64

_ids = itertools.count()
_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording of operations inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation.

    ``data`` is a C-contiguous numpy array (row-major). Zero-sized axes are
    allowed for intermediate results (an empty stop-channel map when s=0);
    :func:`create` rejects them for user-constructed tensors.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        data = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = data if data.flags.c_contiguous else data.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


# ---------------------------------------------------------------------------
# construction


def make_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    """PCG64 generator from an integer seed (or pass an existing generator through)."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ContractError("an explicit seed or generator is required")
    return np.random.Generator(np.random.PCG64(seed))


def create(shape: Sequence[int], init="zeros", *, value: float = 0.0, seed=None,
           lo: float = -1.0, hi: float = 1.0, requires_grad: bool = False) -> Tensor:
    """Allocate a tensor filled with zeros, a constant, or seeded uniform noise.

    ``init`` is one of ``"zeros"``, ``"constant"`` (uses ``value``) or
    ``"uniform"`` (draws from ``[lo, hi)`` with a PCG64 generator built from
    ``seed``; an existing ``numpy.random.Generator`` is used as-is).
    """
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: need at least one axis, all >= 1")
    if init == "zeros":
        data = np.zeros(shape, dtype=DTYPE)
    elif init == "constant":
        data = np.full(shape, float(value), dtype=DTYPE)
    elif init == "uniform":
        if not lo < hi:
            raise ContractError(f"uniform init needs lo < hi, got [{lo}, {hi})")
        data = make_rng(seed).uniform(lo, hi, size=shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0  # gradient at exactly 0 is 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient passes only where a > floor."""
    a = _as_tensor(a)
    mask = a.data > floor
    return _record(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs M x K and K x N, got {a.shape} and {b.shape}")
    return _record(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a, axis0: int = -2, axis1: int = -1) -> Tensor:
    a = _as_tensor(a)
    return _record(np.swapaxes(a.data, axis0, axis1).copy(), (a,),
                   lambda g: (np.swapaxes(g, axis0, axis1),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def conv1d(x, weight, bias=None, dilation: int = 1) -> Tensor:
    """Stride-1, same-padded dilated 1-D convolution.

    ``x`` is ``C_in x T`` or ``B x C_in x T``; ``weight`` is ``C_out x C_in x K``
    with odd K. Each side is zero padded by ``dilation * (K - 1) / 2`` so the
    output keeps T frames.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 3:
        raise ShapeError(f"conv weight must be C_out x C_in x K, got {weight.shape}")
    c_out, c_in, k = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"unsupported kernel size {k}: must be odd")
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[1] != c_in:
        raise ShapeError(f"conv input {x.shape} does not match weight {weight.shape}")
    b, _, t = xd.shape
    pad = dilation * (k - 1) // 2
    w2 = weight.data.reshape(c_out, c_in * k)
    if k == 1:
        cols = xd
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
        cols = np.stack([xp[:, :, j * dilation: j * dilation + t] for j in range(k)], axis=2)
        cols = cols.reshape(b, c_in * k, t)
    out = np.matmul(w2, cols)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv bias must have shape ({c_out},), got {bias.shape}")
        out += bias.data[None, :, None]
        parents = (x, weight, bias)
    if squeeze:
        out = out[0]

    def bw(g):
        g3 = g[None] if squeeze else g
        gw = np.einsum("bot,bit->oi", g3, cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if k == 1:
                gx = gcols
            else:
                gcols = gcols.reshape(b, c_in, k, t)
                gxp = np.zeros((b, c_in, t + 2 * pad))
                for j in range(k):
                    gxp[:, :, j * dilation: j * dilation + t] += gcols[:, :, j]
                gx = gxp[:, :, pad: pad + t]
            if squeeze:
                gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    return _record(out, parents, bw)


# ---------------------------------------------------------------------------
# reductions


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum(a, axis: int | tuple[int, ...], keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = tuple(_check_axis(a, ax) for ax in np.atleast_1d(axis).tolist())
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), bw)


def mean(a, axis: int | tuple[int, ...], keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(_check_axis(a, ax) for ax in np.atleast_1d(axis).tolist())
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axes, keepdims), 1.0 / n)


def var(a, axis: int | tuple[int, ...], keepdims: bool = False) -> Tensor:
    """Population variance (divides by N)."""
    a = _as_tensor(a)
    centered = sub(a, mean(a, axis, keepdims=True))
    return mean(mul(centered, centered), axis, keepdims)


def reduce(kind: str, a, axis, keepdims: bool = False) -> Tensor:
    fn = {"sum": sum, "mean": mean, "var": var}.get(kind)
    if fn is None:
        raise ValueError(f"unknown reduction {kind!r}")
    return fn(a, axis, keepdims)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    axis = _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    axis = _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# concat / split


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    ref = parts[0]
    axis = _check_axis(ref, axis)
    for p in parts[1:]:
        if p.ndim != ref.ndim or any(
            p.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat along {axis}: {p.shape} does not match {ref.shape}")
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum(sizes)[:-1]
    return _record(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(a, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces; zero sizes give empty pieces."""
    a = _as_tensor(a)
    axis = _check_axis(a, axis)
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes) or builtins.sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not sum to axis length {a.shape[axis]}")
    outs = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + size)
        piece = a.data[tuple(sl)].copy()

        def bw(g, sl=tuple(sl)):
            full = np.zeros(a.shape)
            full[sl] = g
            return (full,)

        outs.append(_record(piece, (a,), bw))
        start += size
    return outs


# ---------------------------------------------------------------------------
# differentiation


@dataclass
class Tape:
    """Nodes reachable from a loss, in creation (= topological) order."""

    nodes: list[Tensor] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            node = stack.pop()
            if node.node_id in seen or not node.requires_grad:
                continue
            seen.add(node.node_id)
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n.node_id)
        return cls(nodes)

    def run(self, loss: Tensor) -> None:
        self.grads[loss.node_id] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = self.grads.get(node.node_id)
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in self.grads:
                    self.grads[parent.node_id] = self.grads[parent.node_id] + pg
                else:
                    self.grads[parent.node_id] = pg


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Differentiate a scalar loss; returns ``{leaf: gradient}``.

    The gradient is also stored on each leaf's ``grad`` attribute
    (overwriting any previous value). Leaves not reachable from the loss keep
    their old ``grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no input requires grad)")
    tape = Tape.from_loss(loss)
    tape.run(loss)
    result = {}
    for node in tape.nodes:
        if node.is_leaf:
            g = tape.grads.get(node.node_id)
            if g is None:
                g = np.zeros_like(node.data)
            g = np.asarray(g, dtype=DTYPE).reshape(node.shape)
            node.grad = g
            result[node] = g
    return result


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_entries: int | None = None, seed: int = 0, atol: float = 1e-9) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Relative error per entry is ``|a - n| / max(1e-8, |a| + |n|)``; entries
    agreeing to within ``atol`` count as exact, so gradients that are zero
    analytically are not judged against finite-difference round-off. With
    ``max_entries`` only that many randomly chosen entries per input are
    perturbed (the analytic gradient is still computed in full).
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
    loss = fn(*inputs)
    grads = backward(loss)
    rng = make_rng(seed)
    worst = 0.0
    for t in inputs:
        analytic = grads.get(t, np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                plus = fn(*inputs).item()
                flat[i] = orig - eps
                minus = fn(*inputs).item()
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            diff = abs(analytic[i] - numeric)
            err = 0.0 if diff <= atol else diff / max(1e-8, abs(analytic[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
