"""Reverse-mode automatic differentiation over dense float64 arrays.

Small tape-based engine: forward ops append records to the active Tape,
``Tape.backward`` replays them in reverse. Tensors are rank 0-3, always
float64. A tape and the tensors built on it belong to a single thread;
independent tapes may run on independent threads.
"""

from __future__ import annotations

import threading

import numpy as np

MAX_RANK = 3

# Additive logit mask for "impossible" choices. Large enough that exp()
# underflows to exactly 0.0 after max-subtraction, small enough to stay finite.
NEG_MASK = -1e9


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class TapeError(AutodiffError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Leaf tensors created through the public constructor are checked for
    non-finite values; op results skip the check for speed (exp/log re-check
    their own outputs, and Tape.backward rejects a non-finite loss).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds supported maximum {MAX_RANK}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor holds NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path for op outputs: no finiteness scan.
        out = object.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.ndim != 0:
            raise ShapeError(f"item() needs a rank-0 tensor, got shape {self.shape}")
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; everything routes through the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data) -> Tensor:
    """Constant leaf (no gradient tracking)."""
    return Tensor(data, requires_grad=False)


def param(data) -> Tensor:
    """Trainable leaf: participates in backward and receives a gradient."""
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of executed primitives, consumed exactly once by backward.

    Records are appended in execution order, so reverse iteration is a valid
    topological order for gradient propagation.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _STATE.stack.pop()
        if popped is not self:
            raise TapeError("tape stack corrupted: tapes must nest")
        return False

    def _record(self, out: Tensor, backward_fn) -> None:
        self._records.append((out, backward_fn))
        self._produced.add(id(out))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad leaf reachable from loss."""
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward")
        if loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced on this tape")
        if not np.isfinite(loss.data):
            raise NonFiniteError("loss is not finite")
        self._consumed = True
        loss.grad = np.ones(())
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)
        self._records.clear()
        self._produced.clear()


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _TapeState()


def _active_tape() -> Tape | None:
    stack = _STATE.stack
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Run backward on the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise TapeError("no active tape")
    tape.backward(loss)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _emit(arr: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; record it if a tape is active and any input tracks."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, track)
    if track:
        tape._record(out, backward_fn(out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over axes that numpy broadcasting expanded relative to shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    if out.ndim > MAX_RANK:
        raise ShapeError(f"add result rank {out.ndim} exceeds {MAX_RANK}")

    def bk(_out):
        def fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.shape))
        return fn

    return _emit(out, (a, b), bk)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    if out.ndim > MAX_RANK:
        raise ShapeError(f"mul result rank {out.ndim} exceeds {MAX_RANK}")

    def bk(_out):
        def fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.shape))
        return fn

    return _emit(out, (a, b), bk)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def bk(_out):
        def fn(g):
            if a.requires_grad:
                _accum(a, g * c)
        return fn

    return _emit(out, (a,), bk)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy matmul semantics restricted to rank <= 3.

    Supports plain 2D products, matrix-vector / vector-vector contractions,
    and batched products where either operand carries a leading batch axis.
    """
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("matmul does not take scalars")
    try:
        out = np.matmul(ad, bd)
    except ValueError as e:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from e
    if out.ndim > MAX_RANK:
        raise ShapeError(f"matmul result rank {out.ndim} exceeds {MAX_RANK}")

    def bk(_out):
        def fn(g):
            # Promote vectors to matrices so one transpose rule covers all cases.
            a2 = ad if ad.ndim > 1 else ad[None, :]
            b2 = bd if bd.ndim > 1 else bd[:, None]
            g2 = g
            if bd.ndim == 1:
                g2 = np.expand_dims(g2, axis=-1)
            if ad.ndim == 1:
                g2 = np.expand_dims(g2, axis=-2)
            if a.requires_grad:
                ga = np.matmul(g2, b2.swapaxes(-1, -2))
                if ad.ndim == 1:
                    ga = ga.reshape(ad.shape) if ga.ndim == 2 else _unbroadcast(ga, (1,) + ad.shape).reshape(ad.shape)
                else:
                    ga = _unbroadcast(ga, ad.shape)
                _accum(a, ga)
            if b.requires_grad:
                gb = np.matmul(a2.swapaxes(-1, -2), g2)
                if bd.ndim == 1:
                    gb = gb.reshape(bd.shape) if gb.ndim == 2 else _unbroadcast(gb, bd.shape + (1,)).reshape(bd.shape)
                else:
                    gb = _unbroadcast(gb, bd.shape)
                _accum(b, gb)
        return fn

    return _emit(out, (a, b), bk)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if a.ndim != b.ndim:
        raise ShapeError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: leading shapes differ {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=-1)
    na = a.shape[-1]

    def bk(_out):
        def fn(g):
            if a.requires_grad:
                _accum(a, g[..., :na])
            if b.requires_grad:
                _accum(b, g[..., na:])
        return fn

    return _emit(out, (a, b), bk)


def slice_along(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice on one axis (result owns its memory)."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"slice axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    idx = tuple(slice(None) if d != axis else slice(start, stop) for d in range(a.ndim))
    out = a.data[idx].copy()

    def bk(_out):
        def fn(g):
            if a.requires_grad:
                gp = np.zeros_like(a.data)
                gp[idx] = g
                _accum(a, gp)
        return fn

    return _emit(out, (a,), bk)


def sum_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum to a scalar (axis=None) or over the last axis (axis=-1)."""
    if axis not in (None, -1):
        raise ShapeError("sum_reduce supports axis=None or axis=-1")
    out = a.data.sum(axis=axis)

    def bk(_out):
        def fn(g):
            if a.requires_grad:
                _accum(a, g if axis is None else g[..., None])
        return fn

    return _emit(np.asarray(out), (a,), bk)


def sigmoid(a: Tensor) -> Tensor:
    # Evaluate on the non-overflowing side of exp for each sign.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bk(o):
        od = o.data

        def fn(g):
            if a.requires_grad:
                _accum(a, g * od * (1.0 - od))
        return fn

    return _emit(out, (a,), bk)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bk(o):
        od = o.data

        def fn(g):
            if a.requires_grad:
                _accum(a, g * (1.0 - od * od))
        return fn

    return _emit(out, (a,), bk)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.isfinite(out).all():
        raise NonFiniteError("exp overflow")

    def bk(o):
        od = o.data

        def fn(g):
            if a.requires_grad:
                _accum(a, g * od)
        return fn

    return _emit(out, (a,), bk)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log of non-positive value")
    out = np.log(a.data)

    def bk(_out):
        def fn(g):
            if a.requires_grad:
                _accum(a, g / a.data)
        return fn

    return _emit(out, (a,), bk)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bk(o):
        od = o.data

        def fn(g):
            if a.requires_grad:
                dot = (g * od).sum(axis=-1, keepdims=True)
                _accum(a, od * (g - dot))
        return fn

    return _emit(out, (a,), bk)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bk(o):
        od = o.data

        def fn(g):
            if a.requires_grad:
                _accum(a, g - np.exp(od) * g.sum(axis=-1, keepdims=True))
        return fn

    return _emit(out, (a,), bk)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if len(shape) > MAX_RANK:
        raise ShapeError(f"reshape target rank {len(shape)} exceeds {MAX_RANK}")
    out = a.data.reshape(shape).copy()

    def bk(_out):
        def fn(g):
            if a.requires_grad:
                _accum(a, g.reshape(a.shape))
        return fn

    return _emit(out, (a,), bk)


def pick(a: Tensor, ids: np.ndarray) -> Tensor:
    """Per-row gather: a is (B, V), ids is (B,) ints; result is (B,)."""
    ids = np.asarray(ids)
    if a.ndim != 2 or ids.shape != (a.shape[0],):
        raise ShapeError(f"pick: {a.shape} with ids {ids.shape}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, ids]

    def bk(_out):
        def fn(g):
            if a.requires_grad:
                gp = np.zeros_like(a.data)
                gp[rows, ids] = g
                _accum(a, gp)
        return fn

    return _emit(out, (a,), bk)


def take_rows(w: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup (embedding): w is (R, d), ids is (B,) ints; result is (B, d)."""
    ids = np.asarray(ids)
    if w.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"take_rows: {w.shape} with ids {ids.shape}")
    out = w.data[ids]

    def bk(_out):
        def fn(g):
            if w.requires_grad:
                gp = np.zeros_like(w.data)
                np.add.at(gp, ids, g)
                _accum(w, gp)
        return fn

    return _emit(out, (w,), bk)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, point: Tensor, step: float = 1e-5,
                      floor: float = 1e-12) -> float:
    """Max relative disagreement between backward and central differences.

    f maps a Tensor to a scalar Tensor and must be deterministic. Returns
    max over coordinates of |analytic - central| / (|analytic| + |central| + floor).
    The default floor is an epsilon guard only; raise it to ~1e-7 when checking
    losses of magnitude O(10), where float64 central differences carry
    ~1e-10 absolute noise that would otherwise dominate near-zero coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    probe = Tensor(point.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
        tape.backward(loss)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(analytic)
    flat = probe.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f(Tensor._wrap(probe.data, False)).item()
        flat[i] = keep - step
        lo = f(Tensor._wrap(probe.data, False)).item()
        flat[i] = keep
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError("non-finite evaluation during finite differencing")
        num_flat[i] = (hi - lo) / (2.0 * step)

    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + floor)
    return float(rel.max()) if rel.size else 0.0


def finite_diff_check_params(f, params: dict[str, Tensor], step: float = 1e-5,
                             floor: float = 1e-12) -> float:
    """finite_diff_check across a named parameter collection.

    f takes no arguments and closes over the tensors in params; gradients are
    checked for every coordinate of every tensor.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = f().item()
            flat[i] = keep - step
            lo = f().item()
            flat[i] = keep
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError(f"non-finite evaluation while probing {name}")
            numeric = (hi - lo) / (2.0 * step)
            worst = max(worst, abs(aflat[i] - numeric) / (abs(aflat[i]) + abs(numeric) + floor))
        p.grad = None
    return worst
