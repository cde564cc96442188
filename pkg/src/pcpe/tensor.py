"""Dense float64 tensors with tape-based reverse-mode differentiation.

The numeric core the rest of the package stands on. Deliberate constraints:

- 64-bit floats everywhere; desk-scale problem sizes make precision cheaper
  than chasing drift.
- Row-major numpy storage. No general broadcasting: elementwise ops demand
  equal shapes, and the only shape-bending ops are the explicit last-axis
  ones (`add_rowvec`, `scale_rows`) plus `matmul` on 2-D operands.
- Every op checks its output for NaN/Inf and raises `NumericError` on the
  spot, so divergence surfaces at the op that produced it.
- Recording happens only while a `Tape` is active. Without one, ops are pure
  functions over immutable values and are safe to share across threads.

Typical training loop::

    with Tape() as tape:
        loss = ...          # ops record onto the tape
    tape.backward(loss)     # populates .grad on every reachable parameter
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InputError, NumericError, ShapeError, TapeError

MASK_BIAS = -1e30  # additive logit for masked positions; exp() underflows to exactly 0.0

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """A dense float64 array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the functional ops below do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered op record; creation order is a topological order by construction."""

    __slots__ = ("_nodes", "_spent")

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every tensor the scalar `loss` depends on.

        Walks the node list once, in reverse; parents always precede their
        consumers on the tape, so each output's gradient is complete by the
        time its node runs.
        """
        if self._spent:
            raise TapeError("backward() already ran on this tape; record a new tape")
        if not self._nodes:
            raise TapeError("backward() on an empty tape")
        if loss.data.shape != ():
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        self._spent = True
        loss.grad = np.ones((), dtype=np.float64)
        for out, back in reversed(self._nodes):
            if out.grad is not None:
                back(out.grad)


def constant(data) -> Tensor:
    t = Tensor(data, requires_grad=False)
    if not np.isfinite(t.data).all():
        raise NumericError("constant: non-finite input")
    return t


def parameter(data) -> Tensor:
    t = Tensor(data, requires_grad=True)
    if not np.isfinite(t.data).all():
        raise NumericError("parameter: non-finite initial value")
    return t


def mask_bias(mask: np.ndarray) -> np.ndarray:
    """Boolean keep-mask -> additive logit bias (0 kept, MASK_BIAS dropped)."""
    return np.where(np.asarray(mask, dtype=bool), 0.0, MASK_BIAS)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _record(name: str, out_data: np.ndarray, parents: Sequence[Tensor],
            back: Callable[[np.ndarray], None]) -> Tensor:
    # s - s is 0.0 iff s is finite; sum() is NaN/Inf iff any element is
    # (values here are far from float64 overflow). Cheaper than
    # isfinite().all() on the hot path.
    s = out_data.sum()
    if s - s != 0.0:
        raise NumericError(f"{name}: non-finite values in output")
    recording = False
    if _ACTIVE_TAPES:
        for p in parents:
            if p.requires_grad:
                recording = True
                break
    out = Tensor.__new__(Tensor)  # ops always hand over fresh float64 arrays
    out.data = out_data
    out.requires_grad = recording
    out.grad = None
    if recording:
        _ACTIVE_TAPES[-1]._nodes.append((out, back))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros(t.data.shape, dtype=np.float64)
    t.grad += g


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} vs {b.data.shape}")

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _record("add", a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes {a.data.shape} vs {b.data.shape}")

    def back(g):
        _accum(a, g)
        _accum(b, -g)

    return _record("sub", a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data

    def back(g):
        _accum(a, g * bd)
        _accum(b, g * ad)

    return _record("mul", ad * bd, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    def back(g):
        _accum(a, g * s)

    return _record("scale", a.data * s, (a,), back)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """a[..., d] + v[d], broadcast over leading axes (bias add)."""
    if a.data.shape[-1] != v.data.shape[-1] or v.data.ndim != 1:
        raise ShapeError(f"add_rowvec: shapes {a.data.shape} vs {v.data.shape}")
    d = v.data.shape[0]

    def back(g):
        _accum(a, g)
        _accum(v, g.reshape(-1, d).sum(axis=0))

    return _record("add_rowvec", a.data + v.data, (a, v), back)


def scale_rows(a: Tensor, col: Tensor) -> Tensor:
    """Scale each row of a[n, d] by the matching scalar in col[n, 1]."""
    if a.data.ndim != 2 or col.data.shape != (a.data.shape[0], 1):
        raise ShapeError(f"scale_rows: shapes {a.data.shape} vs {col.data.shape}")
    ad, cd = a.data, col.data

    def back(g):
        _accum(a, g * cd)
        _accum(col, (g * ad).sum(axis=1, keepdims=True))

    return _record("scale_rows", ad * cd, (a, col), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def back(g):
        _accum(a, g @ bd.T)
        _accum(b, ad.T @ g)

    return _record("matmul", ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[n, p] @ w[p, q] + b[q] as one op (the encoder hot path)."""
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0] \
            or b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: shapes {x.data.shape} x {w.data.shape} + "
                         f"{b.data.shape}")
    xd, wd = x.data, w.data

    def back(g):
        _accum(x, g @ wd.T)
        _accum(w, xd.T @ g)
        _accum(b, g.sum(axis=0))

    return _record("linear", xd @ wd + b.data, (x, w, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.data.shape}")

    def back(g):
        _accum(a, np.ascontiguousarray(g.T))

    return _record("transpose", np.ascontiguousarray(a.data.T), (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.data.shape

    def back(g):
        _accum(a, g.reshape(orig))

    return _record("reshape", a.data.reshape(shape), (a,), back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols: expected 2-D, got {a.data.shape}")

    def back(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros(a.data.shape, dtype=np.float64)
            a.grad[:, start:stop] += g

    return _record("slice_cols", np.ascontiguousarray(a.data[:, start:stop]), (a,), back)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; duplicate indices accumulate gradient."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-D, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros(a.data.shape, dtype=np.float64)
            np.add.at(a.grad, idx, g)

    return _record("take_rows", a.data[idx].copy(), (a,), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise InputError("concat_rows: empty input")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi])

    return _record("concat_rows", np.vstack([p.data for p in parts]), tuple(parts), back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise InputError("concat_cols: empty input")
    sizes = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, lo:hi])

    return _record("concat_cols", np.hstack([p.data for p in parts]), tuple(parts), back)


# ---------------------------------------------------------------------------
# nonlinearities and reductions
# ---------------------------------------------------------------------------

def softmax_last(x: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability.

    `bias` is an optional constant additive logit array (broadcastable onto
    x); pass `mask_bias(mask)` to excise masked positions, whose weight
    underflows to exactly 0.0.
    """
    z = x.data if bias is None else x.data + bias
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accum(x, s * (g - inner))

    return _record("softmax_last", s, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to mean 0 / variance 1, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},)")
    if eps <= 0:
        raise InputError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _accum(bias, g.reshape(-1, d).sum(axis=0))
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * term)

    return _record("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Smooth tanh-form GELU; smoothness keeps finite-difference checks clean."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(u)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))

    return _record("gelu", 0.5 * xd * (1.0 + t), (x,), back)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0

    def back(g):
        _accum(x, g * keep)

    return _record("relu", np.where(keep, x.data, 0.0), (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        _accum(x, g * out * (1.0 - out))

    return _record("sigmoid", out, (x,), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise InputError(f"dropout: rate {rate} outside [0, 1)")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def back(g):
        _accum(x, g * keep)

    return _record("dropout", x.data * keep, (x,), back)


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis, keepdims (n, d) -> (n, 1)."""

    def back(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _record("sum_last", a.data.sum(axis=-1, keepdims=True), (a,), back)


def max_last(a: Tensor) -> Tensor:
    """Max over the last axis, keepdims; ties route gradient to the lowest index."""
    idx = a.data.argmax(axis=-1)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)

    def back(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros(a.data.shape, dtype=np.float64)
            np.put_along_axis(
                a.grad, idx[..., None],
                np.take_along_axis(a.grad, idx[..., None], axis=-1) + g, axis=-1)

    return _record("max_last", out, (a,), back)


def sum_all(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, np.full(a.data.shape, g, dtype=np.float64))

    return _record("sum_all", np.asarray(a.data.sum()), (a,), back)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        _accum(a, np.full(a.data.shape, g / n, dtype=np.float64))

    return _record("mean_all", np.asarray(a.data.mean()), (a,), back)


def embedding(table: Tensor, ids) -> Tensor:
    """Look up rows of an embedding table by integer id."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise InputError(
            f"embedding: id out of range [0, {table.data.shape[0]}) in {ids.tolist()}")

    def back(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros(table.data.shape, dtype=np.float64)
            np.add.at(table.grad, ids, g)

    return _record("embedding", table.data[ids].copy(), (table,), back)


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy over rows of a logit matrix.

    Row r is a distribution over columns; targets[r] is the true column.
    """
    targets = np.asarray(targets, dtype=np.intp)
    z = logits.data
    if z.ndim != 2 or targets.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy_rows: logits {z.shape}, targets {targets.shape}")
    B = z.shape[0]
    m = z.max(axis=-1, keepdims=True)
    zs = z - m
    lse = np.log(np.exp(zs).sum(axis=-1))
    rows = np.arange(B)
    losses = lse - zs[rows, targets]
    out = np.asarray(losses.mean())

    def back(g):
        p = np.exp(zs)
        p /= p.sum(axis=-1, keepdims=True)
        p[rows, targets] -= 1.0
        _accum(logits, (g / B) * p)

    return _record("cross_entropy_rows", out, (logits,), back)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def fd_gradients(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                 h: float = 1e-5) -> list[np.ndarray]:
    """Central finite-difference gradients of a scalar loss.

    Re-evaluates `loss_fn` forward-only (no tape), so the result is
    independent of the backward implementation it is used to check.
    """
    grads = []
    for p in params:
        g = np.zeros(p.data.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            gflat[i] = _fd_element(loss_fn, flat, i, h)
        grads.append(g)
    return grads


def _fd_element(loss_fn, flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    hi = loss_fn().item()
    flat[i] = orig - h
    lo = loss_fn().item()
    flat[i] = orig
    return (hi - lo) / (2.0 * h)


def fd_gradients_at(loss_fn: Callable[[], Tensor], param: Tensor,
                    indices: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences at selected flat indices of one parameter."""
    flat = param.data.reshape(-1)
    return np.array([_fd_element(loss_fn, flat, int(i), h) for i in indices])


def max_rel_error(analytic: Iterable[np.ndarray], numeric: Iterable[np.ndarray],
                  floor: float = 1e-5) -> float:
    """Worst elementwise relative error, with a floor so near-zero pairs
    compare absolutely at `floor` scale.

    The floor matters for structurally-zero gradients (e.g. attention key
    biases, which cancel inside softmax): there the central-difference
    estimate is pure cancellation noise (~1e-10) and a raw relative error
    would be meaningless.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
