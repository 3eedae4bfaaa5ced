"""Reverse-mode automatic differentiation on numpy arrays.

Implements exactly the op set the recognizer needs: affine maps, the
gated LSTM recurrence, softmax/log-softmax, elementwise arithmetic,
1-d convolution over attention weights, concatenation, slicing and row
gathering.  Values are float64 throughout; every op is deterministic,
so repeated forward passes over the same inputs are bit-identical.

A graph is built by applying ops to `Tensor` nodes (define-by-run);
`backward` runs the reverse sweep in reverse topological order, and
`grad_check` verifies analytic gradients against central finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "linear",
    "affine",
    "matvec",
    "weighted_sum",
    "tanh",
    "sigmoid",
    "softmax",
    "log_softmax",
    "concat",
    "narrow",
    "row",
    "gather_rows",
    "pick",
    "pick_rows",
    "reshape",
    "sum_all",
    "conv1d",
    "stack_rows",
    "backward",
    "grad_check",
    "GradCheckReport",
    "LstmParams",
    "lstm_init",
    "lstm_step",
    "uniform_init",
    "set_finite_checks",
]


class ShapeError(ValueError):
    """Operand shapes incompatible with an op; the message names the op."""


_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf validation of every node value and gradient.

    Off by default for speed; tests switch it on.
    """
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _require_finite(arr: np.ndarray, where: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {where}")


class Tensor:
    """One node of the computation graph.

    `value` is a float64 ndarray.  Ops record `parents` together with
    the vector-Jacobian product of each parent; `backward` accumulates
    each node's gradient as the sum over all consumers.
    """

    __slots__ = ("value", "grad", "parents", "vjps", "name")

    def __init__(self, value, parents=(), vjps=(), name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjps = vjps
        self.name = name
        _require_finite(self.value, name or "tensor")

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(value, name: str = "") -> Tensor:
    """Leaf node holding learnable values."""
    return Tensor(np.array(value, dtype=np.float64), name=name)


def constant(value, name: str = "") -> Tensor:
    """Leaf node that never receives a gradient of interest."""
    return Tensor(value, name=name)


def uniform_init(rng: np.random.Generator, shape, scale: float = 0.1) -> np.ndarray:
    """Uniform values in [-scale, scale], the default parameter init."""
    return rng.uniform(-scale, scale, size=shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return Tensor(
        out,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(g, b.value.shape),
        ),
        name="add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value - b.value
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    return Tensor(
        out,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(-g, b.value.shape),
        ),
        name="sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value * b.value
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return Tensor(
        out,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
        name="mul",
    )


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return Tensor(a.value * s, parents=(a,), vjps=(lambda g: g * s,), name="scale")


# ---------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T for w of shape (out, in); x is (in,) or (T, in)."""
    _check(w.value.ndim == 2, "linear", f"weight must be 2-d, got {w.shape}")
    _check(
        x.value.ndim in (1, 2) and x.value.shape[-1] == w.value.shape[1],
        "linear",
        f"input {x.shape} does not match weight {w.shape}",
    )
    out = x.value @ w.value.T
    if x.value.ndim == 1:
        vjps = (lambda g: g @ w.value, lambda g: np.outer(g, x.value))
    else:
        vjps = (lambda g: g @ w.value, lambda g: g.T @ x.value)
    return Tensor(out, parents=(x, w), vjps=vjps, name="linear")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w.T + b with b of shape (out,), broadcast over rows."""
    _check(
        b.value.ndim == 1 and b.value.shape[0] == w.value.shape[0],
        "affine",
        f"bias {b.shape} does not match weight {w.shape}",
    )
    y = linear(x, w)
    return Tensor(
        y.value + b.value,
        parents=(y, b),
        vjps=(lambda g: g, lambda g: _unbroadcast(g, b.value.shape)),
        name="affine",
    )


def matvec(m: Tensor, v: Tensor) -> Tensor:
    """m @ v for m (T, D) and v (D,)."""
    _check(
        m.value.ndim == 2 and v.value.ndim == 1 and m.value.shape[1] == v.value.shape[0],
        "matvec",
        f"matrix {m.shape} does not match vector {v.shape}",
    )
    return Tensor(
        m.value @ v.value,
        parents=(m, v),
        vjps=(lambda g: np.outer(g, v.value), lambda g: m.value.T @ g),
        name="matvec",
    )


def weighted_sum(weights: Tensor, rows: Tensor) -> Tensor:
    """Sum of matrix rows weighted per row: weights (T,) with rows (T, D)."""
    _check(
        weights.value.ndim == 1
        and rows.value.ndim == 2
        and weights.value.shape[0] == rows.value.shape[0],
        "weighted_sum",
        f"weights {weights.shape} do not match rows {rows.shape}",
    )
    return Tensor(
        weights.value @ rows.value,
        parents=(weights, rows),
        vjps=(lambda g: rows.value @ g, lambda g: np.outer(weights.value, g)),
        name="weighted_sum",
    )


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * (1.0 - out * out),), name="tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_values(a.value)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * out * (1.0 - out),), name="sigmoid")


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # evaluate on the negative half-line only, to avoid exp overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_values(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction for stability."""
    out = _softmax_values(a.value)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return Tensor(out, parents=(a,), vjps=(vjp,), name="softmax")


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis, with max subtraction."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def vjp(g):
        return g - np.exp(out) * g.sum(axis=-1, keepdims=True)

    return Tensor(out, parents=(a,), vjps=(vjp,), name="log_softmax")


# ---------------------------------------------------------------------------
# structure


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    _check(len(parts) > 0, "concat", "no operands")
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[p.shape for p in parts]} on axis {axis}"
        ) from None
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        index = (slice(None),) * (axis % out.ndim) + (slice(lo, hi),)
        return lambda g: g[index]

    return Tensor(out, parents=parts, vjps=tuple(make_vjp(i) for i in range(len(parts))), name="concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    _check(
        0 <= start and start + length <= a.value.shape[axis],
        "narrow",
        f"slice [{start}, {start + length}) out of range for {a.shape} axis {axis}",
    )
    index = (slice(None),) * (axis % a.value.ndim) + (slice(start, start + length),)

    def vjp(g):
        full = np.zeros_like(a.value)
        full[index] = g
        return full

    return Tensor(a.value[index], parents=(a,), vjps=(vjp,), name="narrow")


def row(a: Tensor, i: int) -> Tensor:
    """Row i of a matrix as a vector."""
    _check(a.value.ndim == 2, "row", f"expected matrix, got {a.shape}")
    _check(0 <= i < a.value.shape[0], "row", f"row {i} out of range for {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.value)
        full[i] = g
        return full

    return Tensor(a.value[i], parents=(a,), vjps=(vjp,), name="row")


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Matrix of rows a[indices[k]]; indices may repeat."""
    idx = np.asarray(indices, dtype=np.intp)
    _check(a.value.ndim == 2, "gather_rows", f"expected matrix, got {a.shape}")
    _check(
        idx.ndim == 1 and (len(idx) == 0 or (idx.min() >= 0 and idx.max() < a.value.shape[0])),
        "gather_rows",
        f"indices out of range for {a.shape}",
    )

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return full

    return Tensor(a.value[idx], parents=(a,), vjps=(vjp,), name="gather_rows")


def pick(a: Tensor, i: int) -> Tensor:
    """Scalar element i of a vector."""
    _check(a.value.ndim == 1, "pick", f"expected vector, got {a.shape}")
    _check(0 <= i < a.value.shape[0], "pick", f"index {i} out of range for {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.value)
        full[i] = g
        return full

    return Tensor(a.value[i], parents=(a,), vjps=(vjp,), name="pick")


def pick_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Vector of a[t, indices[t]], one element per row."""
    idx = np.asarray(indices, dtype=np.intp)
    _check(a.value.ndim == 2, "pick_rows", f"expected matrix, got {a.shape}")
    _check(idx.shape == (a.value.shape[0],), "pick_rows",
           f"need one index per row, got {idx.shape} for {a.shape}")
    _check(len(idx) == 0 or (idx.min() >= 0 and idx.max() < a.value.shape[1]),
           "pick_rows", f"column index out of range for {a.shape}")
    rows = np.arange(a.value.shape[0])

    def vjp(g):
        full = np.zeros_like(a.value)
        full[rows, idx] = g
        return full

    return Tensor(a.value[rows, idx], parents=(a,), vjps=(vjp,), name="pick_rows")


def reshape(a: Tensor, shape) -> Tensor:
    """View the same elements under a new shape."""
    shape = tuple(shape)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def vjp(g):
        return np.asarray(g).reshape(a.value.shape)

    return Tensor(out, parents=(a,), vjps=(vjp,), name="reshape")


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar node."""
    return Tensor(
        a.value.sum(),
        parents=(a,),
        vjps=(lambda g: np.full_like(a.value, float(g)),),
        name="sum_all",
    )


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack vectors of equal length into a matrix, one per row."""
    parts = tuple(parts)
    _check(len(parts) > 0, "stack_rows", "no operands")
    _check(
        all(p.value.ndim == 1 and p.value.shape == parts[0].value.shape for p in parts),
        "stack_rows",
        f"operands must be equal-length vectors, got {[p.shape for p in parts]}",
    )
    out = np.stack([p.value for p in parts], axis=0)

    def make_vjp(i):
        return lambda g: g[i]

    return Tensor(out, parents=parts, vjps=tuple(make_vjp(i) for i in range(len(parts))), name="stack_rows")


def conv1d(a: Tensor, kernel: Tensor) -> Tensor:
    """Same-padded 1-d convolution of a (T,) signal with a (C, W) kernel.

    Returns a (T, C) matrix; W must be odd and padding is zero.
    """
    _check(a.value.ndim == 1, "conv1d", f"signal must be a vector, got {a.shape}")
    _check(
        kernel.value.ndim == 2 and kernel.value.shape[1] % 2 == 1,
        "conv1d",
        f"kernel must be (channels, odd width), got {kernel.shape}",
    )
    T = a.value.shape[0]
    C, W = kernel.value.shape
    pad = (W - 1) // 2
    padded = np.zeros(T + W - 1)
    padded[pad : pad + T] = a.value
    windows = np.lib.stride_tricks.sliding_window_view(padded, W)  # (T, W)
    out = windows @ kernel.value.T  # (T, C)

    def vjp_signal(g):
        dpad = np.zeros(T + W - 1)
        dw = g @ kernel.value  # (T, W)
        for j in range(W):
            dpad[j : j + T] += dw[:, j]
        return dpad[pad : pad + T]

    def vjp_kernel(g):
        return g.T @ windows

    return Tensor(out, parents=(a, kernel), vjps=(vjp_signal, vjp_kernel), name="conv1d")


# ---------------------------------------------------------------------------
# backward sweep


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> None:
    """Fill `grad` for every node reachable from a scalar loss.

    Nodes in `params` are pre-seeded with exact zeros, so parameters
    not on the loss path end up with zero gradients rather than None.
    """
    if loss.value.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.value)
    loss.grad = np.array(1.0)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        _require_finite(np.asarray(g), f"grad of {node.name or 'tensor'}")
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64)
            else:
                parent.grad = parent.grad + contrib


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def __str__(self):
        lines = [
            f"{'PASS' if e.passed else 'FAIL'} {e.name}: max rel err {e.max_rel_err:.3e}"
            for e in self.entries
        ]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (tol {self.tolerance:g})")
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    names: Sequence[str] | None = None,
    step: float = 1e-3,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients to central finite differences.

    `loss_fn` must rebuild the graph from the current parameter values
    and return a scalar loss.  The relative error denominator is
    floored at 1e-6 so exactly-zero gradients compare cleanly.
    """
    loss = loss_fn()
    if loss.value.shape != ():
        raise ShapeError(f"grad_check: loss must be scalar, got shape {loss.value.shape}")
    backward(loss, params)
    analytic = [np.array(p.grad) for p in params]
    if names is None:
        names = [p.name or f"param{i}" for i, p in enumerate(params)]

    entries = []
    for p, an, name in zip(params, analytic, names):
        max_err = 0.0
        flat = p.value.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().value)
            flat[i] = orig - step
            down = float(loss_fn().value)
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            denom = max(abs(fd), abs(an_flat[i]), 1e-6)
            max_err = max(max_err, abs(fd - an_flat[i]) / denom)
        entries.append(GradCheckEntry(name, max_err, max_err < tolerance))
    return GradCheckReport(entries, tolerance)


# ---------------------------------------------------------------------------
# LSTM cell


@dataclass
class LstmParams:
    """Stacked gate parameters; gate order input, forget, cell, output."""

    w: Tensor  # (4H, D + H)
    b: Tensor  # (4H,)

    @property
    def hidden(self) -> int:
        return self.w.value.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.w.value.shape[1] - self.hidden


def lstm_init(rng: np.random.Generator, input_dim: int, hidden: int, prefix: str = "lstm") -> LstmParams:
    return LstmParams(
        w=parameter(uniform_init(rng, (4 * hidden, input_dim + hidden)), name=f"{prefix}.w"),
        b=parameter(np.zeros(4 * hidden), name=f"{prefix}.b"),
    )


def lstm_step(params: LstmParams, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    """One step of the standard gated recurrence; returns (h', c')."""
    h, c = state
    H = params.hidden
    _check(
        x.value.ndim == 1 and x.value.shape[0] == params.input_dim,
        "lstm_step",
        f"input {x.shape} does not match params (input_dim {params.input_dim})",
    )
    _check(
        h.value.shape == (H,) and c.value.shape == (H,),
        "lstm_step",
        f"state shapes {h.shape}/{c.shape} do not match hidden size {H}",
    )
    z = affine(concat([x, h]), params.w, params.b)

    # fused gate math with analytic backward; ~5x fewer nodes than
    # composing from primitives
    zv = z.value
    i_s = _sigmoid_values(zv[0:H])
    f_s = _sigmoid_values(zv[H : 2 * H])
    g_t = np.tanh(zv[2 * H : 3 * H])
    o_s = _sigmoid_values(zv[3 * H : 4 * H])

    c2_val = f_s * c.value + i_s * g_t

    def c2_vjp_z(g):
        dz = np.zeros_like(zv)
        dz[0:H] = g * g_t * i_s * (1.0 - i_s)
        dz[H : 2 * H] = g * c.value * f_s * (1.0 - f_s)
        dz[2 * H : 3 * H] = g * i_s * (1.0 - g_t * g_t)
        return dz

    c2 = Tensor(c2_val, parents=(z, c), vjps=(c2_vjp_z, lambda g: g * f_s), name="lstm_cell")

    tanh_c2 = np.tanh(c2_val)

    def h2_vjp_z(g):
        dz = np.zeros_like(zv)
        dz[3 * H : 4 * H] = g * tanh_c2 * o_s * (1.0 - o_s)
        return dz

    h2 = Tensor(
        o_s * tanh_c2,
        parents=(z, c2),
        vjps=(h2_vjp_z, lambda g: g * o_s * (1.0 - tanh_c2 * tanh_c2)),
        name="lstm_hidden",
    )
    return h2, c2
