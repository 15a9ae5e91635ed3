"""Dense float64 tensors with a reverse-mode autodiff tape.

Values live in numpy arrays; every differentiable op appends a node to the
thread-local active Tape (if any) holding the operands, the output, and a
backward rule.  `backward` replays the tape once, in reverse creation order,
accumulating gradients additively over fan-out.

Layout convention: row-major, last index fastest.  No general broadcasting;
the only shape mixing allowed is scalar-with-array in the elementwise ops,
which the loss expressions need.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor", "Tape", "apply_op", "backward", "grad_check", "GradCheckReport",
    "matmul", "transpose", "add", "sub", "mul", "div", "scale", "add_bias",
    "relu", "softmax_rows", "layer_norm", "reshape", "concat_rows", "sum_all",
]


class Tensor:
    """A dense float64 array plus gradient metadata."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

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

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def check_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {context}")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of operations; usable as a context manager.

    Nodes are appended in creation order, so every operand of node i was
    produced before index i.  A Tape must not be shared across threads;
    tapes on distinct threads are independent.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STATE.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _TapeState()


def _active_tape() -> Tape | None:
    return _STATE.stack[-1] if _STATE.stack else None


def apply_op(inputs: Sequence[Tensor], value: np.ndarray,
             backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Create an op output and record it on the active tape.

    `backward_fn(grad_out)` must return one gradient array (or None) per
    input.  This is also the extension point for custom ops.
    """
    out = Tensor(value, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append((tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Visits the tape nodes exactly once, in reverse order.  Accumulation is
    additive over fan-out.  Gradients of intermediates are held only until
    their producing node is replayed; leaves accumulate into .grad.
    """
    if loss.data.shape not in ((), (1,)):
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    produced = {id(out) for _, out, _ in tape.nodes}
    pending: dict[int, np.ndarray] = {}

    def send(t: Tensor, g: np.ndarray) -> None:
        if id(t) in produced:
            if id(t) in pending:
                pending[id(t)] += g
            else:
                pending[id(t)] = np.array(g, dtype=np.float64, copy=True)
        elif t.requires_grad:
            t.accumulate_grad(g)

    send(loss, np.ones_like(loss.data))
    for inputs, out, backward_fn in reversed(tape.nodes):
        g_out = pending.pop(id(out), None)
        if g_out is None:
            continue
        for t, g in zip(inputs, backward_fn(g_out)):
            if g is not None and t.requires_grad:
                send(t, g)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return apply_op((a, b), ad @ bd, bwd)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (g.T,)

    return apply_op((a,), a.data.T, bwd)


def _binary_shapes(a: Tensor, b: Tensor, name: str):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{name} expects equal shapes (or a scalar side): {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Collapse a gradient back onto a scalar operand.
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return apply_op((a, b), a.data + b.data, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return apply_op((a, b), a.data - b.data, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return apply_op((a, b), ad * bd, bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data

    def bwd(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)

    return apply_op((a, b), ad / bd, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def bwd(g):
        return (g * s,)

    return apply_op((a,), a.data * s, bwd)


def add_bias(m: Tensor, b: Tensor) -> Tensor:
    """Add a length-r vector to every column of an r x s matrix."""
    m, b = _as_tensor(m), _as_tensor(b)
    if m.data.ndim != 2 or b.data.ndim != 1 or m.shape[0] != b.shape[0]:
        raise ShapeError(f"add_bias expects (r,s) and (r,): got {m.shape} and {b.shape}")

    def bwd(g):
        return g, g.sum(axis=1)

    return apply_op((m, b), m.data + b.data[:, None], bwd)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0  # subgradient at exactly 0 is 0

    def bwd(g):
        return (g * mask,)

    return apply_op((a,), np.where(mask, a.data, 0.0), bwd)


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rows of the output sum to 1."""
    m = _as_tensor(m)
    if m.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m.data)):
        raise NumericError("softmax_rows received non-finite input")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return apply_op((m,), y, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the feature axis, then scale and shift.

    1-D input: the whole vector is one feature group.  2-D input (D x N):
    each column is normalized independently over its D entries, matching the
    token-per-column layout used by the encoder.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ShapeError("layer_norm eps must be positive")
    vec = x.data.ndim == 1
    xd = x.data[:, None] if vec else x.data
    if xd.ndim != 2:
        raise ShapeError(f"layer_norm expects a vector or matrix, got shape {x.shape}")
    d = xd.shape[0]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm parameter shapes {gamma.shape}/{beta.shape} do not match D={d}")
    mu = xd.mean(axis=0, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def bwd(g):
        gm = g[:, None] if vec else g
        dgamma = (gm * xhat).sum(axis=1)
        dbeta = gm.sum(axis=1)
        dxhat = gm * gamma.data[:, None]
        dx = inv * (dxhat - dxhat.mean(axis=0, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=0, keepdims=True))
        return dx[:, 0] if vec else dx, dgamma, dbeta

    return apply_op((x, gamma, beta), out[:, 0] if vec else out, bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return apply_op((a,), a.data.reshape(shape), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices vertically (along axis 0)."""
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return [g[offsets[i]:offsets[i + 1]] for i in range(len(parts))]

    return apply_op(tuple(parts), np.concatenate([p.data for p in parts], axis=0), bwd)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shp = a.shape

    def bwd(g):
        return (np.full(shp, float(g)),)

    return apply_op((a,), np.asarray(a.data.sum()), bwd)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    """Worst-coordinate comparison of analytic vs central-difference gradients."""

    def __init__(self):
        self.per_tensor: dict[str, float] = {}
        self.worst: list[tuple[str, int, float, float, float]] = []

    @property
    def max_rel_err(self) -> float:
        return max(self.per_tensor.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def summary(self, top: int = 5) -> str:
        lines = [f"max relative error: {self.max_rel_err:.3e}"]
        for name, idx, a, n, rel in sorted(self.worst, key=lambda w: -w[4])[:top]:
            lines.append(f"  {name}[{idx}]: analytic={a:.6e} numeric={n:.6e} rel={rel:.3e}")
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor],
               params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
               h: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of `f` against central finite differences.

    `f` must rebuild the scalar loss from the current parameter values on
    every call.  Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    items = list(params.items()) if isinstance(params, dict) else list(params)
    for _, t in items:
        t.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in items}

    report = GradCheckReport()
    for name, t in items:
        a_flat = analytic[name].reshape(-1)
        worst_rel, worst_idx, worst_a, worst_n = 0.0, -1, 0.0, 0.0
        for i in range(t.data.size):
            idx = np.unravel_index(i, t.data.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            f_plus = float(f().data)
            t.data[idx] = orig - h
            f_minus = float(f().data)
            t.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst_rel:
                worst_rel, worst_idx, worst_a, worst_n = rel, i, a, numeric
        report.per_tensor[name] = worst_rel
        if worst_idx >= 0:
            report.worst.append((name, worst_idx, worst_a, worst_n, worst_rel))
    return report
