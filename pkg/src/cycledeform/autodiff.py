"""Small reverse-mode automatic differentiation engine over numpy arrays.

Only the operations needed by the deformation model and its losses are
provided. Most ops accept leading batch dimensions; there is no general
broadcasting.

Usage::

    with Tape() as tape:
        w = tape.watch(w_array)
        loss = mean(relu(linear(x, w)))
    tape.backward(loss)
    w.grad

Ops executed outside an active tape (or on inputs that do not require
gradients) are evaluated eagerly without being recorded, which is how
inference runs.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .errors import IndexOutOfRange, NonFiniteValue, ShapeMismatch

_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class _BranchLog:
    """Discrete choices (ReLU masks, max-pool winners) recorded during one
    evaluation and replayed, in the same order, during later ones."""

    def __init__(self):
        self.choices: list = []
        self.replay = False
        self.pos = 0

    def choose(self, choice: np.ndarray) -> np.ndarray:
        if not self.replay:
            self.choices.append(choice)
            return choice
        recorded = self.choices[self.pos]
        self.pos += 1
        return recorded


def _branch(choice_fn):
    log = getattr(_state, "branches", None)
    return choice_fn() if log is None else log.choose(choice_fn())


def _relu_inplace(pre: np.ndarray):
    """ReLU applied in place; returns the mask when branches are being
    recorded or replayed, else None."""
    if getattr(_state, "branches", None) is None:
        np.maximum(pre, 0, out=pre)
        return None
    mask = _branch(lambda: pre > 0)
    pre *= mask
    return mask


def _check_finite(value: np.ndarray, op: str) -> None:
    # one reduction is cheaper than a full isfinite mask; NaN/Inf propagate
    # through the sum, and an overflowing sum falls back to the exact test
    if not np.isfinite(value.sum()) and not np.isfinite(value).all():
        raise NonFiniteValue(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "_backward", "_parents")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._backward = None
        self._parents: tuple = ()

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(value, op)
    out = Tensor(value, op=op)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape._record(out)
    return out


class Tape:
    """Append-only record of differentiable ops, in execution order."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def watch(self, value, dtype=None) -> Tensor:
        arr = np.asarray(value, dtype=dtype)
        return Tensor(arr, requires_grad=True)

    def _record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, output: Tensor, seed=None) -> None:
        """Accumulate d(output)/d(node) into ``.grad`` of every recorded node
        and of every leaf that requires gradients."""
        if seed is None:
            if output.value.size != 1:
                raise ShapeMismatch("backward without a seed needs a scalar output")
            seed = np.ones_like(output.value)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=output.dtype)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent._backward is None:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is not None:
                leaf.grad = g if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# ops


def linear(x, W, b=None, relu: bool = False) -> Tensor:
    """Rows ``x[..., :]`` mapped to ``W @ x + b``; ``W`` is ``(d_out, d_in)``.
    ``relu=True`` fuses a following ReLU."""
    x, W = as_tensor(x), as_tensor(W)
    b = as_tensor(b) if b is not None else None
    d_out, d_in = W.shape
    if x.shape[-1] != d_in or (b is not None and b.shape != (d_out,)):
        raise ShapeMismatch(f"linear: x {x.shape}, W {W.shape}, b {None if b is None else b.shape}")
    xv = x.value
    out = (xv.reshape(-1, d_in) @ W.value.T).reshape(xv.shape[:-1] + (d_out,))
    if b is not None:
        out += b.value
    mask = _relu_inplace(out) if relu else None

    def backward(g):
        if relu:
            g = g * (out > 0 if mask is None else mask)
        g2 = g.reshape(-1, d_out)
        x2 = xv.reshape(-1, d_in)
        gx = (g2 @ W.value).reshape(xv.shape) if x.requires_grad else None
        gW = (g2.T @ x2) if W.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, backward, "linear_relu" if relu else "linear")


def hadamard_affine(x, s, b) -> Tensor:
    """``s * x + b`` applied to each row; ``x`` is ``(..., n, d)`` and ``s``, ``b``
    are ``(..., d)`` with the same leading dimensions."""
    x, s, b = as_tensor(x), as_tensor(s), as_tensor(b)
    if s.shape != b.shape or x.shape[-1] != s.shape[-1] or x.shape[:-2] != s.shape[:-1]:
        raise ShapeMismatch(f"hadamard_affine: x {x.shape}, s {s.shape}, b {b.shape}")
    sv = s.value[..., None, :]
    out = x.value * sv + b.value[..., None, :]

    def backward(g):
        gx = g * sv if x.requires_grad else None
        gs = (g * x.value).sum(axis=-2) if s.requires_grad else None
        gb = g.sum(axis=-2) if b.requires_grad else None
        return gx, gs, gb

    return _make(out, (x, s, b), backward, "hadamard_affine")


def modulated_linear(x, s, b, W, relu: bool = False) -> Tensor:
    """``linear(hadamard_affine(x, s, b), W)`` computed through per-batch
    effective weights ``W * s`` so the modulated input is never materialised.
    ``x`` is ``(B, n, d_in)``, ``s`` and ``b`` are ``(B, d_in)``."""
    x, s, b, W = as_tensor(x), as_tensor(s), as_tensor(b), as_tensor(W)
    d_out, d_in = W.shape
    if x.value.ndim != 3 or s.shape != (x.shape[0], d_in) or b.shape != s.shape or x.shape[-1] != d_in:
        raise ShapeMismatch(f"modulated_linear: x {x.shape}, s {s.shape}, b {b.shape}, W {W.shape}")
    Wv, sv, bv = W.value, s.value, b.value
    W_eff = Wv[None, :, :] * sv[:, None, :]          # (B, d_out, d_in)
    bias = bv @ Wv.T                                 # (B, d_out)
    out = np.matmul(x.value, np.swapaxes(W_eff, 1, 2))
    out += bias[:, None, :]
    mask = _relu_inplace(out) if relu else None

    def backward(g):
        if relu:
            g = g * (out > 0 if mask is None else mask)
        G = np.matmul(np.swapaxes(g, 1, 2), x.value)  # (B, d_out, d_in)
        gsum = g.sum(axis=1)                            # (B, d_out)
        gx = np.matmul(g, W_eff) if x.requires_grad else None
        gs = np.einsum("oi,boi->bi", Wv, G) if s.requires_grad else None
        gb = gsum @ Wv if b.requires_grad else None
        gW = None
        if W.requires_grad:
            gW = np.einsum("boi,bi->oi", G, sv) + gsum.T @ bv
        return gx, gs, gb, gW

    return _make(out, (x, s, b, W), backward, "modulated_linear_relu" if relu else "modulated_linear")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = x.value.copy()
    mask = _relu_inplace(out)

    def backward(g):
        return (g * (out > 0 if mask is None else mask),)

    return _make(out, (x,), backward, "relu")


def tanh_act(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.value)

    def backward(g):
        return (g * (1 - out * out),)

    return _make(out, (x,), backward, "tanh")


def max_pool_points(x) -> Tensor:
    """Column-wise max over the point axis (``-2``); gradient goes to the first
    argmax row of each column."""
    x = as_tensor(x)
    if x.value.ndim < 2 or x.shape[-2] < 1:
        raise ShapeMismatch(f"max_pool_points needs (..., n>=1, d), got {x.shape}")
    arg = _branch(lambda: np.argmax(x.value, axis=-2))
    out = np.take_along_axis(x.value, arg[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        gx = np.zeros_like(x.value)
        np.put_along_axis(gx, arg[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _make(out, (x,), backward, "max_pool_points")


def linear_max_pool(x, W, b=None) -> Tensor:
    """``max_pool_points(linear(x, W, b))`` without materialising the dense
    gradient of the pre-pool activations."""
    x, W = as_tensor(x), as_tensor(W)
    b = as_tensor(b) if b is not None else None
    d_out, d_in = W.shape
    if x.value.ndim < 2 or x.shape[-1] != d_in or (b is not None and b.shape != (d_out,)):
        raise ShapeMismatch(f"linear_max_pool: x {x.shape}, W {W.shape}")
    xv = x.value
    # (..., d_out, n) so the reduction runs over the contiguous axis
    pre = np.matmul(W.value, np.swapaxes(xv, -1, -2))
    if b is not None:
        pre += b.value[:, None]
    arg = _branch(lambda: np.argmax(pre, axis=-1))
    out = np.take_along_axis(pre, arg[..., None], axis=-1)[..., 0]
    del pre
    n = x.shape[-2]

    def backward(g):
        lead = int(np.prod(x.shape[:-2], dtype=np.int64))
        g2 = g.reshape(lead, d_out)
        rows = (arg.reshape(lead, d_out) + (np.arange(lead) * n)[:, None]).ravel()
        cols = np.tile(np.arange(d_out), lead)
        S = sparse.csr_matrix((g2.ravel(), (rows, cols)), shape=(lead * n, d_out))
        gx = (S @ W.value).reshape(xv.shape).astype(x.dtype, copy=False) if x.requires_grad else None
        gW = np.asarray(S.T @ xv.reshape(-1, d_in)).astype(W.dtype, copy=False) if W.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, backward, "linear_max_pool")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, parts, backward, "concat")


def slice_last(x, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``."""
    x = as_tensor(x)
    if not 0 <= start <= stop <= x.shape[-1]:
        raise IndexOutOfRange(f"slice [{start}:{stop}] of last axis {x.shape[-1]}")
    out = x.value[..., start:stop]

    def backward(g):
        gx = np.zeros_like(x.value)
        gx[..., start:stop] = g
        return (gx,)

    return _make(out, (x,), backward, "slice")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _make(a.value + b.value, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}")

    def backward(g):
        return g, -g

    return _make(a.value - b.value, (a, b), backward, "sub")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(x.value * x.dtype.type(c), (x,), backward, "scale")


def total(x) -> Tensor:
    """Sum of all entries (a scalar)."""
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(x.value.sum(), dtype=x.dtype), (x,), backward, "sum")


def mean(x, axis=None) -> Tensor:
    """Mean over all entries, or over a single ``axis``."""
    x = as_tensor(x)
    if axis is None:
        n = x.value.size

        def backward(g):
            return (np.full(x.shape, g / n, dtype=x.dtype),)

        return _make(np.asarray(x.value.mean(), dtype=x.dtype), (x,), backward, "mean")
    ax = axis % x.value.ndim
    n = x.shape[ax]

    def backward_axis(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), x.shape).astype(x.dtype),)

    return _make(x.value.mean(axis=ax), (x,), backward_axis, "mean")


def sum_sq_norm(x) -> Tensor:
    """Sum of squares of all entries."""
    x = as_tensor(x)

    def backward(g):
        return (2 * g * x.value,)

    return _make(np.asarray((x.value * x.value).sum(), dtype=x.dtype), (x,), backward, "sum_sq_norm")


def euclid_norm_rows(x) -> Tensor:
    """Euclidean norm over the last axis; the subgradient at zero is zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.value * x.value).sum(axis=-1))

    def backward(g):
        safe = np.where(norm > 0, norm, 1)
        return ((g / safe * (norm > 0))[..., None] * x.value,)

    return _make(norm, (x,), backward, "euclid_norm_rows")


def _check_index(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise IndexOutOfRange("row indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexOutOfRange(f"row index outside [0, {n})")
    return idx


def take_rows(x, idx) -> Tensor:
    """Differentiable row selection: ``out[..., i, :] = x[..., idx[..., i], :]``.
    Gradients scatter-add back into the selected rows."""
    x = as_tensor(x)
    idx = _check_index(idx, x.shape[-2])
    if idx.shape[:-1] != x.shape[:-2]:
        raise ShapeMismatch(f"take_rows: x {x.shape}, idx {idx.shape}")
    out = np.take_along_axis(x.value, idx[..., None], axis=-2)

    def backward(g):
        lead = int(np.prod(x.shape[:-2], dtype=np.int64))
        n, d = x.shape[-2], x.shape[-1]
        flat = (idx.reshape(lead, -1) + (np.arange(lead) * n)[:, None]).ravel()
        g2 = g.reshape(-1, d)
        gx = np.empty((lead * n, d), dtype=x.dtype)
        for c in range(d):
            gx[:, c] = np.bincount(flat, weights=g2[:, c], minlength=lead * n)
        return (gx.reshape(x.shape),)

    return _make(out, (x,), backward, "take_rows")


def gather_rows(x, idx) -> Tensor:
    """Row selection that blocks gradients: the result is a constant."""
    xv = x.value if isinstance(x, Tensor) else np.asarray(x)
    idx = _check_index(idx, xv.shape[-2])
    if idx.shape[:-1] != xv.shape[:-2]:
        raise ShapeMismatch(f"gather_rows: x {xv.shape}, idx {idx.shape}")
    return Tensor(np.take_along_axis(xv, idx[..., None], axis=-2), op="gather_rows")


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).value, op="stop_gradient")


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    tol_rel: float
    max_rel_err: float = 0.0
    checked: int = 0
    skipped: int = 0
    per_param: dict = field(default_factory=dict)
    worst: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol_rel

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tol_rel:.0e} "
            f"checked={self.checked} skipped={self.skipped}"
        )


def grad_check(
    f: Callable[[dict], Tensor],
    params: dict,
    h: float = 1e-4,
    tol_rel: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
    freeze_branches: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(tensors)`` with central differences.

    ``f`` receives a dict of Tensors keyed like ``params`` and must build its
    graph from them. ``max_entries`` limits the number of probed entries per
    parameter (chosen with ``rng``). Entries where both gradient magnitudes
    are below ``floor`` are skipped.

    With ``freeze_branches`` the ReLU masks and max-pool winners of the
    unperturbed evaluation are replayed in the perturbed ones, so the
    differences probe the smooth piece the analytic gradient belongs to even
    when some unit sits within ``h`` of a kink.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    log = _BranchLog() if freeze_branches else None
    previous = getattr(_state, "branches", None)
    _state.branches = log
    try:
        with Tape() as tape:
            leaves = {k: tape.watch(v) for k, v in params.items()}
            out = f(leaves)
            if out.value.size != 1:
                raise ShapeMismatch("grad_check needs a scalar-valued function")
        tape.backward(out)
        if log is not None:
            log.replay = True
        return _compare(f, params, leaves, h, tol_rel, max_entries, rng, floor, log)
    finally:
        _state.branches = previous


def _compare(f, params, leaves, h, tol_rel, max_entries, rng, floor, log) -> GradCheckReport:
    report = GradCheckReport(tol_rel=tol_rel)
    rng = rng or np.random.default_rng(0)

    def value_at(name, flat_i, delta):
        arr = params[name].copy()
        arr.reshape(-1)[flat_i] += delta
        args = {k: Tensor(arr if k == name else v) for k, v in params.items()}
        if log is not None:
            log.pos = 0
        val = f(args).value
        if not np.isfinite(val).all():
            raise NonFiniteValue(f"f is non-finite at perturbed {name}[{flat_i}]")
        return float(val)

    for name, arr in params.items():
        analytic = leaves[name].grad
        analytic = np.zeros_like(arr) if analytic is None else np.asarray(analytic, dtype=np.float64)
        indices = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            indices = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        worst = 0.0
        for i in indices:
            num = (value_at(name, i, h) - value_at(name, i, -h)) / (2 * h)
            ana = float(analytic.reshape(-1)[i])
            if abs(ana) < floor and abs(num) < floor:
                report.skipped += 1
                continue
            err = abs(ana - num) / max(abs(ana), abs(num))
            report.checked += 1
            if err > worst:
                worst = err
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = (name, int(i), ana, num)
        report.per_param[name] = worst
    return report
