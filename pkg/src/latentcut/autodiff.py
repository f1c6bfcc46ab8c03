"""Reverse-mode automatic differentiation over dense float64 tensors.

Small engine in the micrograd tradition, vectorized with numpy: each
forward pass builds a fresh DAG of ``Tensor`` nodes with parent links and
per-node backward closures, and ``backward`` runs one reverse topological
sweep.
Just enough ops to express the denoiser (linear maps, attention, layer
norm, rotary phases) plus the masked losses.

Conventions:
  * all values are 64-bit floats in row-major buffers, frozen after
    creation so graph nodes are never mutated in place
  * elementwise ops broadcast with numpy's trailing-dimension rule
  * gradients appear on every node reachable from the output after a
    backward sweep; parameter updates rebind ``Tensor.data`` wholesale
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes cannot be combined."""


class GraphError(RuntimeError):
    """Backward called on an unsuitable node."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


class Tensor:
    """One node of the computation graph.

    ``data`` is a read-only float64 ndarray; ``parents`` and ``_bwd`` record
    how the node was produced. ``grad`` is populated by ``backward``.
    """

    __slots__ = ("data", "parents", "grad", "_bwd", "name")

    def __init__(self, data, parents=(), bwd=None, name: str | None = None):
        self.data = _freeze(np.asarray(data, dtype=np.float64))
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.grad: np.ndarray | None = None
        self._bwd = bwd
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def assign(self, values: np.ndarray) -> None:
        """Rebind the buffer (same shape), used by optimizers on leaves."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.data.shape:
            raise ShapeError(f"assign shape {values.shape} != {self.data.shape}")
        self.data = _freeze(values)

    # -- operator sugar ----------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else _axis_count(self.shape, axis)
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / n)


def tensor(data, name: str | None = None) -> Tensor:
    """Leaf node holding a private copy of ``data``."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _axis_count(shape, axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting: reduce ``g`` down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


# -- graph traversal -------------------------------------------------------


class Graph:
    """Topologically ordered view of everything reachable from ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order  # parents before children

    def backward(self) -> None:
        out = self.output
        if out.size != 1:
            raise GraphError(f"backward needs a scalar output, got shape {out.shape}")
        for node in self.nodes:
            node.grad = None
        out.grad = np.ones_like(out.data)
        for node in reversed(self.nodes):
            if node.grad is None or node._bwd is None:
                continue
            node._bwd(node.grad)


def backward(output: Tensor) -> None:
    """Reverse sweep from a scalar; leaves gradients on every reachable node."""
    Graph(output).backward()


def _accum(node: Tensor, g: np.ndarray) -> None:
    # rebinding, never in-place: g may alias another node's buffer
    node.grad = g if node.grad is None else node.grad + g


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data, (a, b))

    def bwd(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(g, b.shape))

    out._bwd = bwd
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data, (a, b))

    def bwd(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(-g, b.shape))

    out._bwd = bwd
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data, (a, b))

    def bwd(g):
        _accum(a, _sum_to_shape(g * b.data, a.shape))
        _accum(b, _sum_to_shape(g * a.data, b.shape))

    out._bwd = bwd
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data, (a, b))

    def bwd(g):
        _accum(a, _sum_to_shape(g / b.data, a.shape))
        _accum(b, _sum_to_shape(-g * a.data / (b.data * b.data), b.shape))

    out._bwd = bwd
    return out


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def map_elementwise(a, b, kind: str) -> Tensor:
    """Broadcasting binary op selected by name ('add'|'sub'|'mul'|'div')."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def texp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), (a,))

    def bwd(g):
        _accum(a, g * out.data)

    out._bwd = bwd
    return out


def tsqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data), (a,))

    def bwd(g):
        _accum(a, g * 0.5 / out.data)

    out._bwd = bwd
    return out


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig, (a,))

    def bwd(g):
        _accum(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    out._bwd = bwd
    return out


# -- shape ops -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    out._bwd = bwd
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = Tensor(np.swapaxes(a.data, ax1, ax2), (a,))

    def bwd(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    out._bwd = bwd
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.shape[axis] for p in parts]

    def bwd(g):
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accum(p, g[tuple(idx)])
            offset += n

    out._bwd = bwd
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}"
        )
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    out = Tensor(a.data[tuple(idx)], (a,))

    def bwd(g):
        full = np.zeros(a.shape)
        full[tuple(idx)] = g
        _accum(a, full)

    out._bwd = bwd
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    out._bwd = bwd
    return out


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dims broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner mismatch: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), (a, b))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _sum_to_shape(ga, a.shape))
        _accum(b, _sum_to_shape(gb, b.shape))

    out._bwd = bwd
    return out


def layernorm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y, (a,))

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - y * gym))

    out._bwd = bwd
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; tolerates -inf entries (zero weight)."""
    z = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, (a,))

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    out._bwd = bwd
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with an optional additive score mask.

    Shapes: q [..., Sq, d], k [..., Sk, d], v [..., Sk, dv]. The mask
    broadcasts against the score tensor [..., Sq, Sk] and may contain -inf
    to remove keys. Raises on non-finite raw scores, which in practice
    signals diverged weights upstream.
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"attention q/k width mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention k/v length mismatch: {k.shape} vs {v.shape}")
    scale = 1.0 / np.sqrt(d)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    if not np.isfinite(scores).all():
        raise FloatingPointError("attention scores are not finite")
    if additive_mask is not None:
        scores = scores + additive_mask
    z = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=-1, keepdims=True)
    out_data = np.matmul(w, v.data)
    out = Tensor(out_data, (q, k, v))

    def bwd(g):
        gv = np.matmul(np.swapaxes(w, -1, -2), g)
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        ds = w * (gw - (gw * w).sum(axis=-1, keepdims=True))
        gq = np.matmul(ds, k.data) * scale
        gk = np.matmul(np.swapaxes(ds, -1, -2), q.data) * scale
        _accum(q, _sum_to_shape(gq, q.shape))
        _accum(k, _sum_to_shape(gk, k.shape))
        _accum(v, _sum_to_shape(gv, v.shape))

    out._bwd = bwd
    return out


def apply_rotation(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs of ``x`` by fixed per-pair angles.

    ``cos``/``sin`` have half the trailing width of ``x`` and broadcast over
    leading dims. The backward pass is the inverse rotation, so gradient
    norms are preserved exactly.
    """
    if x.shape[-1] % 2:
        raise ShapeError(f"rotation needs an even trailing dim, got {x.shape}")
    m = x.shape[-1] // 2
    xr = x.data.reshape(*x.shape[:-1], m, 2)
    ev, od = xr[..., 0], xr[..., 1]
    out_r = np.empty_like(xr)
    out_r[..., 0] = ev * cos - od * sin
    out_r[..., 1] = ev * sin + od * cos
    out = Tensor(out_r.reshape(x.shape), (x,))

    def bwd(g):
        gr = g.reshape(*x.shape[:-1], m, 2)
        ge, go = gr[..., 0], gr[..., 1]
        back = np.empty_like(gr)
        back[..., 0] = ge * cos + go * sin
        back[..., 1] = -ge * sin + go * cos
        _accum(x, back.reshape(x.shape))

    out._bwd = bwd
    return out
