"""Reverse-mode automatic differentiation on an explicit tape.

Everything is float64. A :class:`Tape` records one forward pass: ops
append their pullbacks while they execute (define-by-run) and
:func:`backward` replays the records once, newest first. A
:class:`Tensor` is a thin wrapper around a numpy array; only tensors
explicitly watched on a tape receive gradients, everything else is a
constant. Broadcasting is limited to scalar-with-array. No GPU, no op
fusion, no higher-order derivatives.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import ContractError, DomainError

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Tensor:
    """A float64 array plus an optional binding to the tape that made it."""

    __slots__ = ("values", "tape", "slot")

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)
        self.tape = None
        self.slot = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Copy of this tensor with no tape binding; gradients stop here."""
        return Tensor(self.values.copy())

    def __repr__(self):
        if self.values.size <= 8:
            return f"Tensor({self.values.tolist()})"
        return f"Tensor(shape={self.shape})"

    # Arithmetic sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


class Tape:
    """Append-only record of one forward computation.

    Use as a context manager so watched leaves are released on exit and
    can join a fresh tape on the next loss evaluation:

        with Tape() as tape:
            tape.watch(theta)
            loss = ...
            grads = backward(tape, loss)
    """

    def __init__(self):
        self._nodes = []
        self._n_slots = 0
        self._watched = []

    def _new_slot(self) -> int:
        slot = self._n_slots
        self._n_slots += 1
        return slot

    def watch(self, tensor: Tensor) -> Tensor:
        """Register ``tensor`` as a differentiable leaf of this tape."""
        if tensor.tape is self:
            return tensor
        if tensor.tape is not None:
            raise ContractError("tensor already participates in another tape")
        tensor.tape = self
        tensor.slot = self._new_slot()
        self._watched.append(tensor)
        return tensor

    def release(self):
        """Unbind every watched leaf. Recorded nodes are kept (the tape is dead anyway)."""
        for t in self._watched:
            t.tape = None
            t.slot = None
        self._watched.clear()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.release()
        return False

    def __len__(self):
        return len(self._nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands belong to different tapes")
    return tape


def _record(tape, values, parents) -> Tensor:
    """Wrap ``values`` and, when a tape is live, append the pullback entries."""
    out = Tensor(values)
    if tape is not None:
        out.tape = tape
        out.slot = tape._new_slot()
        entries = [(p.slot, vjp) for p, vjp in parents if p.tape is tape]
        tape._nodes.append((out.slot, entries))
    return out


def backward(tape: Tape, root: Tensor) -> dict:
    """Accumulate d(root)/d(leaf) for every watched leaf of ``tape``.

    Returns a dict keyed by the watched Tensor objects; leaves that root
    does not depend on map to zeros. A root with no tape binding is a
    constant and yields an empty map.
    """
    if root.tape is None:
        return {}
    if root.tape is not tape:
        raise ContractError("root was recorded on a different tape")
    if root.values.size != 1:
        raise ContractError(f"root must be scalar, shape is {root.shape}")
    grads = [None] * tape._n_slots
    grads[root.slot] = np.ones_like(root.values)
    for out_slot, parents in reversed(tape._nodes):
        g = grads[out_slot]
        if g is None:
            continue
        for parent_slot, vjp in parents:
            contrib = vjp(g)
            if grads[parent_slot] is None:
                grads[parent_slot] = contrib
            else:
                grads[parent_slot] = grads[parent_slot] + contrib
    out = {}
    for leaf in tape._watched:
        g = grads[leaf.slot]
        if g is None:
            g = np.zeros_like(leaf.values)
        out[leaf] = Tensor(np.broadcast_to(g, leaf.values.shape).copy())
    return out


def _unbroadcast(g, shape):
    """Reduce an upstream gradient back to ``shape`` (scalar or identical)."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.reshape(shape)


def _check_elementwise(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.values.ndim == 0 or b.values.ndim == 0:
        return
    raise ContractError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")
    tape = _tape_of(a, b)
    return _record(
        tape,
        a.values + b.values,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")
    tape = _tape_of(a, b)
    return _record(
        tape,
        a.values - b.values,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
    )


def mul(a, b) -> Tensor:
    """Elementwise product; one operand may be scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    tape = _tape_of(a, b)
    av, bv = a.values, b.values
    return _record(
        tape,
        av * bv,
        [(a, lambda g: _unbroadcast(g * bv, a.shape)), (b, lambda g: _unbroadcast(g * av, b.shape))],
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "div")
    tape = _tape_of(a, b)
    av, bv = a.values, b.values
    return _record(
        tape,
        av / bv,
        [
            (a, lambda g: _unbroadcast(g / bv, a.shape)),
            (b, lambda g: _unbroadcast(-g * av / (bv * bv), b.shape)),
        ],
    )


def scale(a, c: float) -> Tensor:
    """Multiply by a plain python scalar (no gradient for ``c``)."""
    a = _as_tensor(a)
    c = float(c)
    return _record(_tape_of(a), a.values * c, [(a, lambda g: g * c)])


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    tape = _tape_of(a, b)
    av, bv = a.values, b.values
    return _record(
        tape,
        av @ bv,
        [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)],
    )


def matvec_flat(g_flat, w, p: int, m: int) -> Tensor:
    """Row-batched matrix-vector product with the matrices stored flat.

    ``g_flat`` has shape (B, p*m), each row a row-major (p, m) matrix;
    ``w`` has shape (B, m). Returns (B, p) with out[b] = G_b @ w[b].
    """
    g_flat, w = _as_tensor(g_flat), _as_tensor(w)
    if g_flat.values.ndim != 2 or g_flat.shape[1] != p * m:
        raise ContractError(f"matvec_flat: matrix operand {g_flat.shape} does not hold (.,{p}*{m})")
    if w.values.ndim != 2 or w.shape != (g_flat.shape[0], m):
        raise ContractError(f"matvec_flat: vector operand {w.shape} != ({g_flat.shape[0]}, {m})")
    tape = _tape_of(g_flat, w)
    batch = g_flat.shape[0]
    g3 = g_flat.values.reshape(batch, p, m)
    wv = w.values
    out = np.einsum("bpm,bm->bp", g3, wv)

    def vjp_matrix(g):
        return (g[:, :, None] * wv[:, None, :]).reshape(batch, p * m)

    def vjp_vector(g):
        return np.einsum("bpm,bp->bm", g3, g)

    return _record(tape, out, [(g_flat, vjp_matrix), (w, vjp_vector)])


def repeat_rows(a, n: int) -> Tensor:
    """Stack a 1-D tensor as ``n`` identical rows; the pullback sums rows."""
    a = _as_tensor(a)
    if a.values.ndim != 1:
        raise ContractError(f"repeat_rows: expected a 1-D tensor, got shape {a.shape}")
    return _record(
        _tape_of(a),
        np.broadcast_to(a.values, (n, a.shape[0])).copy(),
        [(a, lambda g: g.sum(axis=0))],
    )


def repeat_interleave_rows(a, k: int) -> Tensor:
    """Repeat each row of a 2-D tensor ``k`` times in place, (B, n) -> (B*k, n)."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ContractError(f"repeat_interleave_rows: expected a 2-D tensor, got shape {a.shape}")
    if k < 1:
        raise ContractError(f"repeat_interleave_rows: k must be >= 1, got {k}")
    rows, cols = a.shape
    return _record(
        _tape_of(a),
        np.repeat(a.values, k, axis=0),
        [(a, lambda g: g.reshape(rows, k, cols).sum(axis=1))],
    )


def reshape(a, shape) -> Tensor:
    """View the same elements under a new shape; the pullback reshapes back."""
    a = _as_tensor(a)
    old = a.shape
    values = a.values.reshape(shape)
    return _record(_tape_of(a), values, [(a, lambda g: g.reshape(old))])


def tsum(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    shape = a.shape
    return _record(_tape_of(a), np.asarray(a.values.sum()), [(a, lambda g: np.broadcast_to(g, shape))])


def sum_rows(a) -> Tensor:
    """Sum a 2-D tensor along its second axis, giving shape (rows,)."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ContractError(f"sum_rows: expected a 2-D tensor, got shape {a.shape}")
    shape = a.shape
    return _record(
        _tape_of(a),
        a.values.sum(axis=1),
        [(a, lambda g: np.broadcast_to(g[:, None], shape))],
    )


def tmean(a) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    shape = a.shape
    n = a.values.size
    return _record(
        _tape_of(a),
        np.asarray(a.values.mean()),
        [(a, lambda g: np.broadcast_to(g / n, shape))],
    )


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.values)
    return _record(_tape_of(a), t, [(a, lambda g: g * (1.0 - t * t))])


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.values > 0
    return _record(_tape_of(a), np.where(mask, a.values, 0.0), [(a, lambda g: g * mask)])


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # tanh form is stable for large |x|
    s = 0.5 * (1.0 + np.tanh(0.5 * a.values))
    return _record(_tape_of(a), s, [(a, lambda g: g * s * (1.0 - s))])


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.values)
    return _record(_tape_of(a), e, [(a, lambda g: g * e)])


def log(a) -> Tensor:
    a = _as_tensor(a)
    if not np.all(a.values > 0):
        raise DomainError("log: input must be strictly positive")
    av = a.values
    return _record(_tape_of(a), np.log(av), [(a, lambda g: g / av)])


def square(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    return _record(_tape_of(a), av * av, [(a, lambda g: 2.0 * g * av)])


def gaussian_log_density(x, mu, sigma) -> Tensor:
    """Diagonal-Gaussian log density, summed over all coordinates.

    sum_i [ -0.5*log(2*pi) - log(sigma_i) - (x_i - mu_i)^2 / (2*sigma_i^2) ],
    differentiable in every argument. Shapes must match elementwise
    semantics (identical, or scalar mu/sigma against array x).
    """
    x, mu, sigma = _as_tensor(x), _as_tensor(mu), _as_tensor(sigma)
    if not np.all(sigma.values > 0):
        raise DomainError("gaussian_log_density: sigma must be strictly positive")
    z = div(sub(x, mu), sigma)
    # log(sigma) broadcasts against z inside the add, so a scalar sigma is counted once per coordinate
    per_coord = add(log(sigma), scale(square(z), 0.5))
    n = z.values.size
    return neg(add(tsum(per_coord), Tensor(n * _HALF_LOG_2PI)))


def gaussian_log_density_rows(x, mu, sigma) -> Tensor:
    """Per-row diagonal-Gaussian log density for 2-D inputs, shape (rows,)."""
    x, mu, sigma = _as_tensor(x), _as_tensor(mu), _as_tensor(sigma)
    if x.values.ndim != 2:
        raise ContractError(f"gaussian_log_density_rows: expected 2-D x, got {x.shape}")
    if not np.all(sigma.values > 0):
        raise DomainError("gaussian_log_density_rows: sigma must be strictly positive")
    z = div(sub(x, mu), sigma)
    per_coord = add(log(sigma), scale(square(z), 0.5))
    n_cols = x.shape[1]
    return neg(add(sum_rows(per_coord), Tensor(np.full(x.shape[0], n_cols * _HALF_LOG_2PI))))


def reparam_sample(mu, sigma, noise) -> Tensor:
    """mu + sigma * noise with noise held constant; gradients reach mu and sigma only."""
    mu, sigma = _as_tensor(mu), _as_tensor(sigma)
    noise = _as_tensor(noise)
    if noise.tape is not None:
        raise ContractError("reparam_sample: noise must not be differentiable")
    return add(mu, mul(sigma, Tensor(noise.values)))


def numeric_gradient(f: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. every coordinate of ``param``.

    ``f`` must re-run the forward pass from the current parameter values.
    ``param.values`` is perturbed in place and restored before returning.
    """
    flat = param.values.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(param.values.shape)
