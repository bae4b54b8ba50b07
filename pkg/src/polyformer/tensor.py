"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape-based engine supplying every tensor operation the transformer
and its training losses need. Ops executed while a ``Tape`` is active are
recorded in creation order, which is also a valid topological order;
``backward`` walks the tape once in reverse. The same tape doubles as the
source for the arithmetic-circuit tracer in :mod:`polyformer.polygraph`,
so every op carries a stable ``op`` kind string and enough metadata to
classify it later.

Values are always float64. Broadcasting follows numpy rules internally
(needed for bias adds and keepdims-reduced operands); the public
``elementwise`` entry point enforces the stricter equal-shapes-or-scalar
contract.
"""

from __future__ import annotations

import json
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _special

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "power",
    "maximum",
    "absolute",
    "exp",
    "log",
    "clamp",
    "reshape",
    "transpose",
    "embedding",
    "relu",
    "gelu",
    "softmax",
    "reduce",
    "elementwise",
    "activation",
    "backward",
    "grad_check",
    "tensor_to_snapshot",
    "tensor_from_snapshot",
]


class Tape:
    """Ordered record of recorded tensors (the differentiation graph).

    Node order equals creation order, so every input precedes its consumer
    and a single reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> bool:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


_ACTIVE_TAPE: Tape | None = None


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


class Tensor:
    """N-dimensional float64 array, optionally part of a differentiation graph.

    ``meta`` carries tracer annotations (site labels, graph-input marks);
    it never influences numerics.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "meta")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.meta: dict = {}

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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # Operator sugar. Internal broadcasting is allowed here; the strict
    # public surface is `elementwise`.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data, requires_grad=requires_grad)


def _record(
    op: str,
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable | None,
    meta: dict | None = None,
) -> Tensor:
    out = Tensor(out_data)
    out.op = op
    if meta:
        out.meta.update(meta)
    tape = _ACTIVE_TAPE
    if tape is not None:
        out.parents = tuple(parents)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._backward = backward
        tape.nodes.append(out)
    return out


def _accumulate(grads: dict, t: Tensor, g: np.ndarray) -> None:
    prev = grads.get(t)
    grads[t] = g if prev is None else prev + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast to produce it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data + b.data

    def bw(g, grads):
        _accumulate(grads, a, _unbroadcast(g, a.shape))
        _accumulate(grads, b, _unbroadcast(g, b.shape))

    return _record("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data - b.data

    def bw(g, grads):
        _accumulate(grads, a, _unbroadcast(g, a.shape))
        _accumulate(grads, b, _unbroadcast(-g, b.shape))

    return _record("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data * b.data

    def bw(g, grads):
        _accumulate(grads, a, _unbroadcast(g * b.data, a.shape))
        _accumulate(grads, b, _unbroadcast(g * a.data, b.shape))

    return _record("mul", out, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = tensor(a)
    c = float(c)
    out = a.data * c

    def bw(g, grads):
        _accumulate(grads, a, g * c)

    return _record("scale", out, (a,), bw, meta={"factor": c})


def power(a, p: float) -> Tensor:
    """a ** p with a real exponent.

    Non-integer exponents require a strictly positive base.
    """
    a = tensor(a)
    p = float(p)
    if p != int(p) and np.any(a.data <= 0):
        bad = float(a.data[a.data <= 0].flat[0])
        raise DomainError(bad, (0.0, math.inf), site="power")
    out = a.data ** p

    def bw(g, grads):
        _accumulate(grads, a, g * p * a.data ** (p - 1.0))

    return _record("power", out, (a,), bw, meta={"exponent": p})


def maximum(a, b) -> Tensor:
    """Elementwise max; gradient routes to the first argument on ties."""
    a, b = tensor(a), tensor(b)
    out = np.maximum(a.data, b.data)
    take_a = a.data >= b.data

    def bw(g, grads):
        _accumulate(grads, a, _unbroadcast(g * take_a, a.shape))
        _accumulate(grads, b, _unbroadcast(g * ~take_a, b.shape))

    return _record("maximum", out, (a, b), bw)


def absolute(a) -> Tensor:
    a = tensor(a)
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def bw(g, grads):
        _accumulate(grads, a, g * sign)

    return _record("absolute", out, (a,), bw)


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)

    def bw(g, grads):
        _accumulate(grads, a, g * out)

    return _record("exp", out, (a,), bw)


def log(a) -> Tensor:
    a = tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(float(a.data[a.data <= 0].flat[0]), (0.0, math.inf), site="log")
    out = np.log(a.data)

    def bw(g, grads):
        _accumulate(grads, a, g / a.data)

    return _record("log", out, (a,), bw)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through unclipped entries."""
    a = tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g, grads):
        _accumulate(grads, a, g * inside)

    return _record("clamp", out, (a,), bw, meta={"lo": float(lo), "hi": float(hi)})


# ---------------------------------------------------------------------------
# linear algebra and data movement


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # 2-D products use non-optimized einsum: sequential summation matches
    # a naive triple loop bit-for-bit and is independent of the BLAS
    # build. Batched products go through BLAS for speed; einsum's strided
    # inner loops are an order of magnitude slower there.
    if a.ndim == 2 and b.ndim == 2:
        return np.einsum("ik,kj->ij", a, b, optimize=False)
    return np.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes must match exactly, or one operand may be a plain 2-D
    matrix (the usual weight case).
    """
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la != lb and la != () and lb != ():
        raise ShapeError(f"matmul leading dimensions disagree: {a.shape} @ {b.shape}")
    out = _mm(a.data, b.data)

    def bw(g, grads):
        ga = _mm(g, np.swapaxes(b.data, -1, -2))
        gb = _mm(np.swapaxes(a.data, -1, -2), g)
        if ga.shape != a.shape:
            ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
        if gb.shape != b.shape:
            gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
        _accumulate(grads, a, ga)
        _accumulate(grads, b, gb)

    return _record("matmul", out, (a, b), bw)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = tensor(a)
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    old = a.shape

    def bw(g, grads):
        _accumulate(grads, a, g.reshape(old))

    return _record("reshape", out, (a,), bw, meta={"shape": shape})


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = tensor(a)
    axes = tuple(int(x) for x in axes)
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def bw(g, grads):
        _accumulate(grads, a, np.transpose(g, inverse))

    return _record("transpose", out, (a,), bw, meta={"axes": axes})


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]. ids are plain ints."""
    table = tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding id out of range: ids in [{ids.min()}, {ids.max()}], table rows {table.shape[0]}"
        )
    out = table.data[ids]

    def bw(g, grads):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accumulate(grads, table, gt)

    return _record("embedding", out, (table,), bw, meta={"ids": ids})


# ---------------------------------------------------------------------------
# reductions


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        return axis % ndim
    return tuple(a % ndim for a in axis)


def reduce(kind: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """Reduce along an axis (or everything): mean, var, max, min, sum.

    Variance is the biased (divide-by-N) estimator. max/min route their
    subgradient to the first maximal element in index order.
    """
    x = tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    counted = (
        x.size
        if axis is None
        else int(np.prod([x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]))
    )
    if counted == 0:
        raise ShapeError(f"cannot reduce over empty axis {axis} of shape {x.shape}")

    if kind == "sum":
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def bw(g, grads):
            _accumulate(grads, x, np.broadcast_to(_expand(g, x.shape, axis, keepdims), x.shape).copy())

        return _record("sum", out, (x,), bw, meta={"axis": axis, "keepdims": keepdims})

    if kind == "mean":
        out = x.data.mean(axis=axis, keepdims=keepdims)

        def bw(g, grads):
            gx = np.broadcast_to(_expand(g, x.shape, axis, keepdims), x.shape) / counted
            _accumulate(grads, x, gx.copy())

        return _record("mean", out, (x,), bw, meta={"axis": axis, "keepdims": keepdims, "count": counted})

    if kind == "var":
        mu = x.data.mean(axis=axis, keepdims=True)
        out = ((x.data - mu) ** 2).mean(axis=axis, keepdims=keepdims)
        centered = x.data - mu

        def bw(g, grads):
            gx = np.broadcast_to(_expand(g, x.shape, axis, keepdims), x.shape) * 2.0 * centered / counted
            _accumulate(grads, x, gx)

        return _record("var", out, (x,), bw, meta={"axis": axis, "keepdims": keepdims})

    if kind in ("max", "min"):
        if axis is not None and not isinstance(axis, int):
            raise ShapeError(f"{kind} reduction supports a single axis or None, got {axis}")
        fn = np.max if kind == "max" else np.min
        arg = np.argmax if kind == "max" else np.argmin
        out = fn(x.data, axis=axis, keepdims=keepdims)
        # First extremal index in index order; argmax/argmin already pick it.
        if axis is None:
            mask = np.zeros(x.size)
            mask[arg(x.data.reshape(-1))] = 1.0
            mask = mask.reshape(x.shape)
        else:
            idx = arg(x.data, axis=axis)
            mask = np.zeros_like(x.data)
            np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)

        def bw(g, grads):
            _accumulate(grads, x, _expand(g, x.shape, axis, keepdims) * mask)

        return _record(kind, out, (x,), bw, meta={"axis": axis, "keepdims": keepdims})

    raise ValueError(f"unknown reduction kind {kind!r}")


def _expand(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Reinsert reduced axes so a reduction gradient broadcasts back."""
    if axis is None:
        return np.broadcast_to(g, shape) if keepdims or g.ndim == 0 else np.full(shape, g)
    if keepdims:
        return g
    axes = axis if isinstance(axis, tuple) else (axis,)
    for a in sorted(axes):
        g = np.expand_dims(g, a)
    return g


# ---------------------------------------------------------------------------
# activations


def relu(x) -> Tensor:
    x = tensor(x)
    out = np.maximum(x.data, 0.0)
    pos = x.data > 0

    def bw(g, grads):
        _accumulate(grads, x, g * pos)

    return _record("relu", out, (x,), bw)


def _gelu_value(v: np.ndarray) -> np.ndarray:
    return 0.5 * v * (1.0 + _special.erf(v / math.sqrt(2.0)))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = tensor(x)
    out = _gelu_value(x.data)
    cdf = 0.5 * (1.0 + _special.erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    deriv = cdf + x.data * pdf

    def bw(g, grads):
        _accumulate(grads, x, g * deriv)

    return _record("gelu", out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, grads):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(grads, x, out * (g - inner))

    return _record("softmax", out, (x,), bw, meta={"axis": axis})


def elementwise(kind: str, a, b=None) -> Tensor:
    """Strict public elementwise entry point: shapes equal or b scalar."""
    a = tensor(a)
    if kind in ("add", "sub", "mul"):
        b_t = tensor(b)
        if b_t.shape != a.shape and b_t.size != 1:
            raise ShapeError(f"elementwise {kind}: shapes {a.shape} vs {b_t.shape}")
        return {"add": add, "sub": sub, "mul": mul}[kind](a, b_t)
    if kind == "scale":
        return scale(a, float(b))
    if kind == "power":
        return power(a, float(b))
    raise ValueError(f"unknown elementwise kind {kind!r}")


def activation(kind: str, x, *, axis: int = -1, poly=None, strict_domain: bool = True) -> Tensor:
    """Apply an activation: relu, gelu, softmax (axis-normalized), or poly.

    For ``poly``, pass a Polynomial or CompositePolynomial; strict domain
    mode raises DomainError on out-of-range inputs, otherwise inputs are
    clamped to the domain endpoints.
    """
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "softmax":
        return softmax(x, axis=axis)
    if kind == "poly":
        if poly is None:
            raise ValueError("poly activation requires a polynomial")
        mode = "strict" if strict_domain else "clamp"
        return poly.eval_tensor(tensor(x), domain_mode=mode)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar loss through a recorded tape.

    Returns gradients keyed by leaf tensors with ``requires_grad``; also
    accumulates them into each leaf's ``.grad``.
    """
    if loss.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones(())}
    for node in reversed(tape.nodes):
        g = grads.pop(node, None)
        if g is None or node._backward is None:
            continue
        node._backward(g, grads)
    result: dict[Tensor, np.ndarray] = {}
    for t, g in grads.items():
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
            result[t] = g
    return result


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if y.shape != ():
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    backward(tape, y)
    analytic = np.zeros_like(x.data) if x.grad is None else np.array(x.grad, dtype=np.float64)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.data.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


# ---------------------------------------------------------------------------
# snapshots (test fixtures)


def tensor_to_snapshot(t: Tensor) -> str:
    return json.dumps({"shape": list(t.shape), "data": t.data.reshape(-1).tolist()})


def tensor_from_snapshot(s: str) -> Tensor:
    obj = json.loads(s)
    return Tensor(np.array(obj["data"], dtype=np.float64).reshape(obj["shape"]))
