"""Reverse-mode automatic differentiation on float64 numpy arrays.

A small tape-based autograd engine: every differentiable operation returns a
``Tensor`` that remembers its parents and a closure propagating the incoming
gradient to them.  ``backward`` performs one reverse sweep over the recorded
graph (iterative topological order, so unrolled time-stepping loops of
hundreds of steps are fine).  Gradients accumulate additively at fan-out.

The op set is deliberately minimal: dense/convolutional layers, pointwise
nonlinearities, linear resampling, channel-wise affine modulation, and the
reductions needed for squared-error losses.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "smul",
    "sadd",
    "concat",
    "rows",
    "linear",
    "conv",
    "modulate",
    "elu",
    "tanh",
    "resample_down",
    "resample_up",
    "sum_",
    "mean_",
    "sum_squares",
    "ParamStore",
    "adam_step",
    "uniform_fan_in",
    "GraphCycle",
    "ShapeMismatch",
    "OddExtent",
]


class ShapeMismatch(ValueError):
    """Operands with incompatible shapes."""


class OddExtent(ValueError):
    """Down-sampling requires even spatial extents."""


class GraphCycle(RuntimeError):
    """The recorded graph is not acyclic (malformed recording)."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus the tape bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "_parents", "_backward", "is_param")

    def __init__(self, data, parents=(), backward_fn=None, is_param=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents if _GRAD_ENABLED else ()
        self._backward = backward_fn if _GRAD_ENABLED else None
        self.is_param = is_param

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, param={self.is_param})"

    # Operator sugar; all real work lives in module-level functions.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return sadd(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return sadd(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return smul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return smul(self, -1.0)


def tensor(data) -> Tensor:
    """Wrap raw data as a constant (leaf) tensor."""
    return Tensor(data)


def _unary(x: Tensor, out: np.ndarray, bw) -> Tensor:
    return Tensor(out, parents=(x,), backward_fn=bw)


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss, accumulating grads on every node.

    Parameters keep their ``grad`` buffers across calls (zeroed explicitly by
    the optimizer); intermediate nodes get fresh buffers per sweep.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeMismatch("backward expects a scalar loss")

    # Iterative topological sort (post-order DFS); recursion would overflow
    # on graphs from long unrolled rollouts.
    order: list[Tensor] = []
    state: dict[int, int] = {}  # id -> 0 visiting, 1 done
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        nid = id(node)
        if processed:
            state[nid] = 1
            order.append(node)
            continue
        st = state.get(nid)
        if st == 1:
            continue
        if st == 0:
            raise GraphCycle("cycle detected in recorded graph")
        state[nid] = 0
        stack.append((node, True))
        for p in node._parents:
            if state.get(id(p)) is None:
                stack.append((p, False))
            elif state.get(id(p)) == 0:
                raise GraphCycle("cycle detected in recorded graph")

    for node in order:
        if not node.is_param or node.grad is None:
            node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)

    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{op}: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bw(g):
        a.grad += g
        b.grad += g

    return Tensor(a.data + b.data, parents=(a, b), backward_fn=bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bw(g):
        a.grad += g
        b.grad -= g

    return Tensor(a.data - b.data, parents=(a, b), backward_fn=bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bw(g):
        a.grad += g * b.data
        b.grad += g * a.data

    return Tensor(a.data * b.data, parents=(a, b), backward_fn=bw)


def smul(x: Tensor, c: float) -> Tensor:
    def bw(g):
        x.grad += c * g

    return _unary(x, c * x.data, bw)


def sadd(x: Tensor, c: float) -> Tensor:
    def bw(g):
        x.grad += g

    return _unary(x, x.data + c, bw)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p.grad += g[tuple(idx)]

    return Tensor(
        np.concatenate([p.data for p in parts], axis=axis),
        parents=tuple(parts),
        backward_fn=bw,
    )


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice along axis 0."""

    def bw(g):
        x.grad[start:stop] += g

    return _unary(x, x.data[start:stop], bw)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def elu(x: Tensor) -> Tensor:
    """ELU with unit alpha: x for x>0, exp(x)-1 otherwise."""
    pos = x.data > 0
    out = np.where(pos, x.data, np.expm1(x.data))

    def bw(g):
        x.grad += g * np.where(pos, 1.0, out + 1.0)

    return _unary(x, out, bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        x.grad += g * (1.0 - out * out)

    return _unary(x, out, bw)


# ---------------------------------------------------------------------------
# dense / convolutional layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on row vectors: (B, in) @ (out, in)^T + (out,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeMismatch(f"linear: x {x.data.shape}, weight {weight.data.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        x.grad += g @ weight.data
        weight.grad += g.T @ x.data
        if bias is not None:
            bias.grad += g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out, parents=parents, backward_fn=bw)


def conv(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Size-3 convolution with zero padding 1; spatial shape is preserved.

    1D: x (B, C_in, X), kernel (C_out, C_in, 3).
    2D: x (B, C_in, H, W), kernel (C_out, C_in, 3, 3).
    Implemented as a sum of per-tap matmuls over the channel dimension.
    """
    nd = x.data.ndim - 2
    if nd not in (1, 2):
        raise ShapeMismatch(f"conv expects (B,C,X) or (B,C,H,W), got {x.data.shape}")
    if kernel.data.ndim != nd + 2 or any(s != 3 for s in kernel.data.shape[2:]):
        raise ShapeMismatch(f"conv kernel must have spatial size 3, got {kernel.data.shape}")
    if kernel.data.shape[1] != x.data.shape[1]:
        raise ShapeMismatch(
            f"conv channels: input {x.data.shape[1]}, kernel expects {kernel.data.shape[1]}"
        )
    if nd == 1:
        out, ctx = _conv1d_forward(x.data, kernel.data)
    else:
        out, ctx = _conv2d_forward(x.data, kernel.data)
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * nd)

    def bw(g):
        if nd == 1:
            dx, dk = _conv1d_backward(g, kernel.data, ctx)
        else:
            dx, dk = _conv2d_backward(g, kernel.data, ctx)
        x.grad += dx
        kernel.grad += dk
        if bias is not None:
            bias.grad += g.sum(axis=(0,) + tuple(range(2, g.ndim)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor(out, parents=parents, backward_fn=bw)


def _conv1d_forward(x, k):
    b, c, n = x.shape
    xp = np.zeros((b, c, n + 2))
    xp[:, :, 1:-1] = x
    out = np.zeros((b, k.shape[0], n))
    for t in range(3):
        # (C_out, C_in) applied along the channel axis of the shifted input
        out += np.tensordot(xp[:, :, t : t + n], k[:, :, t], axes=(1, 1)).transpose(0, 2, 1)
    return out, xp


def _conv1d_backward(g, k, xp):
    n = g.shape[2]
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(k)
    for t in range(3):
        dk[:, :, t] = np.tensordot(g, xp[:, :, t : t + n], axes=((0, 2), (0, 2)))
        dxp[:, :, t : t + n] += np.tensordot(g, k[:, :, t], axes=(1, 0)).transpose(0, 2, 1)
    return dxp[:, :, 1:-1], dk


def _conv2d_forward(x, k):
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    out = np.zeros((b, k.shape[0], h, w))
    for ti in range(3):
        for tj in range(3):
            patch = xp[:, :, ti : ti + h, tj : tj + w]
            out += np.tensordot(patch, k[:, :, ti, tj], axes=(1, 1)).transpose(0, 3, 1, 2)
    return out, xp


def _conv2d_backward(g, k, xp):
    h, w = g.shape[2:]
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(k)
    for ti in range(3):
        for tj in range(3):
            patch = xp[:, :, ti : ti + h, tj : tj + w]
            dk[:, :, ti, tj] = np.tensordot(g, patch, axes=((0, 2, 3), (0, 2, 3)))
            dxp[:, :, ti : ti + h, tj : tj + w] += np.tensordot(
                g, k[:, :, ti, tj], axes=(1, 0)
            ).transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dk


def modulate(h: Tensor, gb: Tensor) -> Tensor:
    """Channel-wise affine modulation with a near-identity offset.

    ``gb`` has shape (B, 2C): first half is the scale offset, second the
    shift.  Output is h * (1 + gb[:, :C]) + gb[:, C:], broadcast over space,
    so zero-initialized modulation heads start as the identity.
    """
    b, c = h.data.shape[:2]
    if gb.data.shape != (b, 2 * c):
        raise ShapeMismatch(f"modulate: h {h.data.shape}, gb {gb.data.shape}")
    sp = (1,) * (h.data.ndim - 2)
    gamma = 1.0 + gb.data[:, :c].reshape(b, c, *sp)
    beta = gb.data[:, c:].reshape(b, c, *sp)

    def bw(g):
        axes = tuple(range(2, g.ndim))
        h.grad += g * gamma
        gb.grad[:, :c] += (g * h.data).sum(axis=axes) if axes else (g * h.data)
        gb.grad[:, c:] += g.sum(axis=axes) if axes else g

    return Tensor(h.data * gamma + beta, parents=(h, gb), backward_fn=bw)


# ---------------------------------------------------------------------------
# linear interpolation resampling
# ---------------------------------------------------------------------------


def _down_axis(x, axis):
    if x.shape[axis] % 2:
        raise OddExtent(f"axis {axis} has odd extent {x.shape[axis]}")
    idx0 = [slice(None)] * x.ndim
    idx1 = [slice(None)] * x.ndim
    idx0[axis] = slice(0, None, 2)
    idx1[axis] = slice(1, None, 2)
    return 0.5 * (x[tuple(idx0)] + x[tuple(idx1)])


def _down_axis_adjoint(g, axis):
    shape = list(g.shape)
    shape[axis] *= 2
    out = np.zeros(shape)
    idx0 = [slice(None)] * g.ndim
    idx1 = [slice(None)] * g.ndim
    idx0[axis] = slice(0, None, 2)
    idx1[axis] = slice(1, None, 2)
    out[tuple(idx0)] = 0.5 * g
    out[tuple(idx1)] = 0.5 * g
    return out


def _sl(ndim, axis, s):
    idx = [slice(None)] * ndim
    idx[axis] = s
    return tuple(idx)


def _up_axis(x, axis):
    # Samples live at cell centers; doubling interpolates linearly between
    # neighbors and clamps at the ends, so constants are reproduced exactly
    # and linear ramps at interior nodes.
    m = x.shape[axis]
    shape = list(x.shape)
    shape[axis] = 2 * m
    out = np.empty(shape)
    nd = x.ndim
    lo = x[_sl(nd, axis, slice(0, m - 1))]
    hi = x[_sl(nd, axis, slice(1, m))]
    out[_sl(nd, axis, slice(2, None, 2))] = 0.25 * lo + 0.75 * hi
    out[_sl(nd, axis, slice(1, 2 * m - 1, 2))] = 0.75 * lo + 0.25 * hi
    out[_sl(nd, axis, 0)] = x[_sl(nd, axis, 0)]
    out[_sl(nd, axis, 2 * m - 1)] = x[_sl(nd, axis, m - 1)]
    return out


def _up_axis_adjoint(g, axis):
    m = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis] = m
    out = np.zeros(shape)
    nd = g.ndim
    g_even = g[_sl(nd, axis, slice(2, None, 2))]
    g_odd = g[_sl(nd, axis, slice(1, 2 * m - 1, 2))]
    out[_sl(nd, axis, slice(0, m - 1))] += 0.25 * g_even + 0.75 * g_odd
    out[_sl(nd, axis, slice(1, m))] += 0.75 * g_even + 0.25 * g_odd
    out[_sl(nd, axis, 0)] += g[_sl(nd, axis, 0)]
    out[_sl(nd, axis, m - 1)] += g[_sl(nd, axis, 2 * m - 1)]
    return out


def resample_down(x: Tensor) -> Tensor:
    """Halve every spatial axis by adjacent-pair averaging (channels kept)."""
    axes = tuple(range(2, x.data.ndim))
    out = x.data
    for ax in axes:
        out = _down_axis(out, ax)

    def bw(g):
        for ax in reversed(axes):
            g = _down_axis_adjoint(g, ax)
        x.grad += g

    return _unary(x, out, bw)


def resample_up(x: Tensor) -> Tensor:
    """Double every spatial axis by midpoint linear interpolation."""
    axes = tuple(range(2, x.data.ndim))
    out = x.data
    for ax in axes:
        out = _up_axis(out, ax)

    def bw(g):
        for ax in reversed(axes):
            g = _up_axis_adjoint(g, ax)
        x.grad += g

    return _unary(x, out, bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(x: Tensor) -> Tensor:
    def bw(g):
        x.grad += g

    return _unary(x, np.asarray(x.data.sum()), bw)


def mean_(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        x.grad += g / n

    return _unary(x, np.asarray(x.data.mean()), bw)


def sum_squares(x: Tensor) -> Tensor:
    """Scalar sum of squared entries (fused, saves tape nodes in losses)."""

    def bw(g):
        x.grad += 2.0 * g * x.data

    return _unary(x, np.asarray((x.data * x.data).sum()), bw)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------


@dataclass
class _Slot:
    value: Tensor
    m: np.ndarray
    v: np.ndarray


@dataclass
class ParamStore:
    """Named learnable tensors with gradient and Adam moment buffers."""

    _slots: dict[str, _Slot] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._slots:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), is_param=True)
        t.grad = np.zeros_like(t.data)
        self._slots[name] = _Slot(t, np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._slots[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def names(self) -> list[str]:
        return list(self._slots)

    def tensors(self) -> list[Tensor]:
        return [s.value for s in self._slots.values()]

    def n_parameters(self) -> int:
        return sum(s.value.data.size for s in self._slots.values())

    def zero_grad(self) -> None:
        for s in self._slots.values():
            s.value.grad[...] = 0.0

    def adam_state(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        slot = self._slots[name]
        return slot.m, slot.v

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: s.value.data.copy() for k, s in self._slots.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, arr in values.items():
            slot = self._slots[k]
            if slot.value.data.shape != arr.shape:
                raise ShapeMismatch(f"parameter {k!r}: {slot.value.data.shape} vs {arr.shape}")
            slot.value.data[...] = arr


def adam_step(
    store: ParamStore,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One Adam update with decoupled (multiplicative) weight decay.

    Decay shrinks the parameter before the adaptive step, so it never enters
    the moment estimates.
    """
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for slot in store._slots.values():
        p, g = slot.value.data, slot.value.grad
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        slot.m *= b1
        slot.m += (1.0 - b1) * g
        slot.v *= b2
        slot.v += (1.0 - b2) * g * g
        p -= lr * (slot.m / c1) / (np.sqrt(slot.v / c2) + eps)


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Seeded uniform init in +-fan_in^(-1/2)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
