"""Small dense-tensor library with tape-based reverse-mode differentiation.

Values are float64 numpy arrays. Every primitive computes its forward value
eagerly and, when a :class:`Tape` is active and any input tracks gradients,
appends a record holding a closure that maps the output gradient to input
gradients. :meth:`Tape.backward` replays the records in exact reverse order.

Example::

    w = Tensor(np.ones(3), requires_grad=True, name="w")
    with Tape() as tape:
        loss = ops.sum(w * w)
    grads = tape.backward(loss)   # {"w": 2 * w.data}
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

# Additive stand-in for -inf in attention masks.
NEG_INF = -1e9

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "cate_active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class GradientError(FloatingPointError):
    """A gradient or loss became NaN or infinite."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; all route through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications for one training context."""

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(x) into ``x.grad`` for every tracked tensor.

        Returns a name -> gradient dict for ``params`` (or for every named
        leaf reached, when ``params`` is None). Tracked parameters the loss
        does not depend on receive zero gradients.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise GradientError(f"loss is not finite: {float(loss.data)}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.out), None)
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                leaves.setdefault(key, t)
        result: dict[str, np.ndarray] = {}
        targets = params if params is not None else {
            t.name: t for t in leaves.values() if t.name is not None
        }
        for name, t in targets.items():
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            if not np.isfinite(g).all():
                raise GradientError(f"non-finite gradient for parameter {name!r}")
            t.grad = g if t.grad is None else t.grad + g
            result[name] = t.grad
        return result


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(op, out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _record("add", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    return _record("mul", out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape),
        _unbroadcast(g * a.data, b.shape),
    ))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    on = x.data > 0
    out = Tensor(np.where(on, x.data, 0.0))
    return _record("relu", out, (x,), lambda g: (g * on,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    out = Tensor(data)
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))
    return _record("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    ref = list(xs[0].shape)
    ax = axis % len(ref)
    for x in xs[1:]:
        s = list(x.shape)
        if len(s) != len(ref) or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: shapes {[x.shape for x in xs]} differ off axis {axis}")
    out = Tensor(np.concatenate([x.data for x in xs], axis=ax))
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _record("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=ax)))


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; gradients scatter-add back into rows."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")
    out = Tensor(table.data[idx])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", out, (table,), backward)


def gather_rows(x: Tensor, rows) -> Tensor:
    """``x[b, rows[b], :]`` for a (B, N, d) tensor -> (B, d)."""
    rows = np.asarray(rows, dtype=np.int64)
    if x.ndim != 3 or rows.shape != (x.shape[0],):
        raise ShapeError(f"gather_rows: x {x.shape} with rows {rows.shape}")
    batch = np.arange(x.shape[0])
    out = Tensor(x.data[batch, rows])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[batch, rows] = g
        return (gx,)

    return _record("gather_rows", out, (x,), backward)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    return mul(sum(x), 1.0 / x.data.size)


def masked_softmax(scores: Tensor, allowed) -> Tensor:
    """Softmax over the last axis restricted to ``allowed`` keys.

    ``allowed`` is a boolean array broadcastable to ``scores``. Forbidden
    entries receive the ``NEG_INF`` sentinel before normalisation and are
    zeroed exactly afterwards.
    """
    scores = _as_tensor(scores)
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), scores.shape)
    if not allowed.any(axis=-1).all():
        raise ValueError("masked_softmax: a query row has no attendable key (malformed mask)")
    z = np.where(allowed, scores.data, scores.data + NEG_INF)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z) * allowed
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("masked_softmax", out, (scores,), backward)


def cross_entropy(logits: Tensor, targets, select) -> Tensor:
    """Mean negative log-likelihood over the positions where ``select`` is true.

    ``logits`` has shape (..., V); ``targets`` and ``select`` have the
    leading shape. Unselected positions contribute neither loss nor gradient.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    select = np.asarray(select, dtype=bool)
    if targets.shape != logits.shape[:-1] or select.shape != targets.shape:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape}, targets {targets.shape}, select {select.shape}"
        )
    count = int(select.sum())
    if count == 0:
        raise ValueError("cross_entropy: position mask selects no positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, np.where(select, targets, 0)[..., None], axis=-1)[..., 0]
    out = Tensor(-(picked * select).sum() / count)

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.where(select, targets, 0)[..., None], 1.0, axis=-1)
        return ((p - onehot) * select[..., None] * (g / count),)

    return _record("cross_entropy", out, (logits,), backward)


def mse(pred: Tensor, target) -> Tensor:
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    out = Tensor(np.mean(diff * diff))
    return _record("mse", out, (pred,), lambda g: (g * 2.0 * diff / diff.size,))


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name (``"matmul"``, ``"relu"``, ...)."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "embedding": embedding,
    "gather_rows": gather_rows,
    "sum": sum,
    "mean": mean,
    "masked_softmax": masked_softmax,
    "cross_entropy": cross_entropy,
    "mse": mse,
}


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coordinates: int
    n_directions: int
    worst: str

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _relu_pattern(loss_fn: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    tape = Tape()
    with tape:
        loss = loss_fn()
    return float(loss.data), [r.out.data > 0 for r in tape.records if r.op == "relu"]


def _rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    n_coordinates: int = 40,
    n_directions: int = 4,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients with central finite differences.

    Checks ``n_coordinates`` randomly chosen scalar entries and
    ``n_directions`` random unit directions through the whole parameter
    vector. Relative error is ``|a-b| / max(|a|, |b|, floor)``. Probes whose
    ±eps evaluations land on different ReLU activation patterns straddle a
    kink, where the derivative is undefined; they are redrawn.
    """
    rng = rng or np.random.default_rng(0)
    for t in params.values():
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    analytic = tape.backward(loss, params)
    names = list(params)
    sizes = np.array([params[n].data.size for n in names])

    def probe(direction: dict[str, np.ndarray]):
        saved = {n: params[n].data.copy() for n in direction}
        for n, d in direction.items():
            params[n].data = saved[n] + eps * d
        fp, pat_p = _relu_pattern(loss_fn)
        for n, d in direction.items():
            params[n].data = saved[n] - eps * d
        fm, pat_m = _relu_pattern(loss_fn)
        for n in direction:
            params[n].data = saved[n]
        smooth = len(pat_p) == len(pat_m) and all(np.array_equal(a, b) for a, b in zip(pat_p, pat_m))
        return (fp - fm) / (2 * eps), smooth

    worst, worst_label = 0.0, ""
    done_c = 0
    attempts = 0
    while done_c < n_coordinates and attempts < 20 * n_coordinates:
        attempts += 1
        k = rng.choice(len(names), p=sizes / sizes.sum())
        name = names[k]
        flat = int(rng.integers(sizes[k]))
        unit = np.zeros(params[name].data.size)
        unit[flat] = 1.0
        numeric, smooth = probe({name: unit.reshape(params[name].shape)})
        if not smooth:
            continue
        err = _rel_err(numeric, float(analytic[name].reshape(-1)[flat]), floor)
        if err > worst:
            worst, worst_label = err, f"{name}[{flat}]"
        done_c += 1
    done_d = 0
    attempts = 0
    while done_d < n_directions and attempts < 20 * max(n_directions, 1):
        attempts += 1
        direction = {n: rng.standard_normal(params[n].shape) for n in names}
        norm = np.sqrt(np.sum([np.sum(d * d) for d in direction.values()]))
        direction = {n: d / norm for n, d in direction.items()}
        numeric, smooth = probe(direction)
        if not smooth:
            continue
        exact = float(np.sum([np.sum(analytic[n] * direction[n]) for n in names]))
        err = _rel_err(numeric, exact, floor)
        if err > worst:
            worst, worst_label = err, f"direction#{done_d}"
        done_d += 1
    return GradCheckReport(worst, done_c, done_d, worst_label)


def backward_and_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], check: bool = False, **kwargs):
    """Gradients of ``loss_fn()`` for ``params``, plus a finite-difference report in check mode."""
    for t in params.values():
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, params)
    grads = {k: v.copy() for k, v in grads.items()}
    if not check:
        return grads, None
    return grads, check_gradients(loss_fn, params, **kwargs)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
