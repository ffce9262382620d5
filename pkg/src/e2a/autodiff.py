"""Dense float64 tensors with a reverse-mode tape.

A :class:`Tensor` is an immutable wrapper around a float64 ``ndarray``.  A
tensor becomes *tracked* when it is created by :meth:`Tape.watch`, and every
primitive applied to a tracked tensor appends one record to that tape.
:func:`backward` then sweeps the records in exact reverse creation order.

Tensors without a tape behave as constants: primitives on them compute
values but record nothing, so the same model code serves inference and
training.  There is no global state, which keeps independent runs safe to
execute on separate threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteValue, NotScalar, ShapeMismatch, StateMismatch, UnreachableLeaf

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "backward",
    "finite_diff_check",
    "finite_diff_check_params",
    "AdamState",
    "adam_init",
    "adam_step",
    "OP_CATALOG",
]


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"non-finite value produced by {where}")


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, values, tape: Tape | None = None, node: int | None = None):
        data = np.array(values, dtype=np.float64)
        if data.ndim > 0 and 0 in data.shape:
            raise ShapeMismatch(f"empty dimension in shape {data.shape}")
        _check_finite(data, "tensor creation")
        data.flags.writeable = False
        self.data = data
        self.tape = tape
        self.node = node

    @classmethod
    def _wrap(cls, data: np.ndarray, tape=None, node=None) -> Tensor:
        # internal fast path: data already float64 and checked
        t = cls.__new__(cls)
        data.flags.writeable = False
        t.data = data
        t.tape = tape
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    @property
    def tracked(self) -> bool:
        return self.tape is not None and self.tape.active

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class _Record(NamedTuple):
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Append-only record of primitive applications.

    Use as a context manager to bound its lifetime; once closed, operations
    on its tensors no longer record and behave like constants.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.active = True
        self._next = 0

    def __enter__(self) -> Tape:
        return self

    def __exit__(self, *exc) -> None:
        self.active = False

    def _new_node(self) -> int:
        node = self._next
        self._next += 1
        return node

    def watch(self, values) -> Tensor:
        """Create a leaf tensor whose adjoint can be requested."""
        if isinstance(values, Tensor):
            values = values.data
        t = Tensor(values)
        t.tape = self
        t.node = self._new_node()
        return t

    def _record(self, kind, inputs, out, vjp) -> Tensor:
        node = self._new_node()
        self.records.append(_Record(kind, tuple(x.node if x.tape is self else None for x in inputs), node, vjp))
        return Tensor._wrap(out, self, node)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _tape_of(*inputs: Tensor) -> Tape | None:
    tape = None
    for x in inputs:
        if x.tracked:
            if tape is not None and x.tape is not tape:
                raise ValueError("inputs are tracked on different tapes")
            tape = x.tape
    return tape


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    out = np.asarray(out, dtype=np.float64)
    _check_finite(out, kind)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor._wrap(out)
    return tape._record(kind, inputs, out, vjp)


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{kind}: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    """2-D matrix product.  ``a`` may be a constant ``scipy.sparse`` operator."""
    b = _as_tensor(b)
    if sp.issparse(a):
        if b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
        op = a.tocsr()
        out = np.asarray(op @ b.data)
        return _emit("matmul", (b,), out, lambda g: ((op.T @ g),))
    a = _as_tensor(a)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def add_row(x, bias) -> Tensor:
    """Add a bias vector to every row of a matrix."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeMismatch(f"add_row: {x.shape} + {bias.shape}")
    return _emit("add_row", (x, bias), x.data + bias.data, lambda g: (g, g.sum(axis=0)))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _emit("log", (x,), out, lambda g: (g / xd,))


def _softmax_rows(xd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    return e / s, (m + np.log(s))[..., 0]


def logsumexp_rows(x) -> Tensor:
    """Max-shifted log-sum-exp over the last axis."""
    x = _as_tensor(x)
    if x.data.ndim not in (1, 2):
        raise ShapeMismatch(f"logsumexp_rows: {x.shape}")
    _check_finite(x.data, "logsumexp input")
    p, out = _softmax_rows(x.data)
    return _emit("logsumexp", (x,), np.asarray(out), lambda g: (np.expand_dims(g, -1) * p,))


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    xd = x.data
    if axis is None:
        return _emit("sum", (x,), np.asarray(xd.sum()), lambda g: (np.broadcast_to(g, xd.shape).copy(),))
    out = xd.sum(axis=axis)
    return _emit("sum", (x,), out, lambda g: (np.broadcast_to(np.expand_dims(g, axis), xd.shape).copy(),))


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def concat(parts: Sequence) -> Tensor:
    """Concatenate along the last axis."""
    parts = [_as_tensor(p) for p in parts]
    lead = {p.shape[:-1] for p in parts}
    if len(lead) != 1:
        raise ShapeMismatch(f"concat: leading shapes {sorted(lead)}")
    widths = np.cumsum([p.shape[-1] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _emit("concat", parts, out, lambda g: tuple(np.split(g, widths, axis=-1)))


def gather_rows(x, index) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0])):
        raise ShapeMismatch(f"gather_rows: index out of range for {x.shape}")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", (x,), x.data[idx], vjp)


def sq_norm(x) -> Tensor:
    """Sum of squares of all entries."""
    x = _as_tensor(x)
    xd = x.data
    return _emit("sq_norm", (x,), np.asarray(np.sum(xd * xd)), lambda g: (2.0 * g * xd,))


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy of row-softmax against integer targets."""
    logits = _as_tensor(logits)
    y = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeMismatch(f"softmax_cross_entropy: logits {logits.shape}, targets {y.shape}")
    if y.min() < 0 or y.max() >= logits.shape[1]:
        raise ShapeMismatch("softmax_cross_entropy: target out of range")
    n = y.shape[0]
    p, lse = _softmax_rows(logits.data)
    loss = np.mean(lse - logits.data[np.arange(n), y])

    def vjp(g):
        d = p.copy()
        d[np.arange(n), y] -= 1.0
        return (d * (g / n),)

    return _emit("softmax_ce", (logits,), np.asarray(loss), vjp)


def reparameterize(mu, logvar, noise) -> Tensor:
    """``mu + exp(logvar / 2) * noise``; ``noise`` is a constant."""
    mu, logvar = _as_tensor(mu), _as_tensor(logvar)
    eps = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    if not (mu.shape == logvar.shape == eps.shape):
        raise ShapeMismatch(f"reparameterize: {mu.shape}, {logvar.shape}, {eps.shape}")
    with np.errstate(over="ignore"):
        std = np.exp(0.5 * logvar.data)
    out = mu.data + std * eps
    return _emit("reparameterize", (mu, logvar), out, lambda g: (g, 0.5 * g * std * eps))


OP_CATALOG: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "add_row": add_row,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "logsumexp": logsumexp_rows,
    "sum": sum,
    "mean": mean,
    "concat": concat,
    "gather_rows": gather_rows,
    "sq_norm": sq_norm,
    "scale": scale,
    "softmax_ce": softmax_cross_entropy,
    "reparameterize": reparameterize,
}


def op_catalog(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a registered primitive by name."""
    try:
        fn = OP_CATALOG[kind]
    except KeyError:
        raise KeyError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse sweep


class GradientMap(dict):
    """Adjoints keyed by node id; indexing by the leaf tensor also works."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node
        return super().__contains__(key)


def backward(loss: Tensor, leaves: Sequence[Tensor]) -> GradientMap:
    if loss.data.size != 1:
        raise NotScalar(f"loss has shape {loss.shape}")
    tape = loss.tape
    if tape is None or loss.node is None:
        raise UnreachableLeaf("loss is not recorded on any tape")
    for leaf in leaves:
        if leaf.tape is not tape:
            raise UnreachableLeaf(f"leaf {leaf.node} lives on a different tape")

    adj: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    for rec in reversed(tape.records):
        if rec.output > loss.node:
            continue
        g = adj.get(rec.output)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if inp is None:
                continue
            gi = np.asarray(gi)
            prev = adj.get(inp)
            adj[inp] = gi if prev is None else prev + gi

    out = GradientMap()
    for leaf in leaves:
        g = adj.get(leaf.node)
        if g is None:
            raise UnreachableLeaf(f"leaf {leaf.node} does not reach the loss")
        out[leaf.node] = Tensor(np.reshape(g, leaf.shape))
    return out


# ---------------------------------------------------------------------------
# finite differences


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``fn`` maps a tensor to a scalar tensor.
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with Tape() as tape:
        x = tape.watch(x0)
        analytic = backward(fn(x), [x])[x].data
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp.reshape(-1)[i] += step
        xm.reshape(-1)[i] -= step
        flat[i] = (fn(Tensor(xp)).item() - fn(Tensor(xm)).item()) / (2 * step)
    return _rel_err(analytic, numeric)


def finite_diff_check_params(
    fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Like :func:`finite_diff_check` over every array of a parameter dict.

    With ``max_coords`` set, a seeded random subset of coordinates per array
    is checked instead of all of them.
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    with Tape() as tape:
        leaves = {k: tape.watch(v) for k, v in params.items()}
        grads = backward(fn(leaves), list(leaves.values()))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in params.items():
        analytic = grads[leaves[name]].values
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(rng.choice(arr.size, max_coords, replace=False))
        numeric = np.empty(coords.size)
        for j, i in enumerate(coords):
            vals = []
            for sgn in (1.0, -1.0):
                pert = np.array(arr, dtype=np.float64)
                pert.reshape(-1)[i] += sgn * step
                trial = {k: Tensor(pert if k == name else v) for k, v in params.items()}
                vals.append(fn(trial).item())
            numeric[j] = (vals[0] - vals[1]) / (2 * step)
        worst = max(worst, _rel_err(analytic[coords], numeric))
    return worst


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        0,
        {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
        {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
        beta1,
        beta2,
        eps,
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Inputs are left untouched.

    Parameters missing from ``grads`` keep their value and moments.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if state.m.keys() != params.keys():
        raise StateMismatch("optimizer state does not match parameter names")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for k, g in grads.items():
        if k not in params:
            raise StateMismatch(f"gradient for unknown parameter {k!r}")
        g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
        if g.shape != params[k].shape or state.m[k].shape != params[k].shape:
            raise StateMismatch(f"shape mismatch for {k!r}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v, b1, b2, state.eps)
