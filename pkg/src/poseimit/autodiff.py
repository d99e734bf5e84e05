"""Reverse-mode automatic differentiation on a dynamic tape.

Every primitive's backward rule is itself written in terms of primitives, so
gradients returned by :func:`gradient` are ordinary graph nodes and can be
differentiated again (the double backprop needed by the critic's gradient
penalty).  The same rule code runs whether or not recording is active, so a
plain first-order backward pass and a re-differentiable one follow the exact
same numeric path.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "PrecisionPolicy",
    "AutodiffError",
    "ShapeError",
    "NumericError",
    "TapeMismatchError",
    "NotInGraphError",
    "tensor",
    "gradient",
    "no_grad",
    "apply_primitive",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "add_rowvec",
    "colsum",
    "broadcast_rows",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "concat",
    "crop",
    "sum_all",
    "expand_scalar",
    "abs_pow",
    "signed_abs_pow",
    "pow_scalar",
    "l2_norm",
    "rowsum",
    "mean_all",
    "init_uniform",
    "AdamState",
    "adam_init",
    "adam_step",
    "clip_gradients",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NumericError(AutodiffError):
    pass


class TapeMismatchError(AutodiffError):
    pass


class NotInGraphError(AutodiffError):
    pass


class PrecisionPolicy:
    """Mode 'test' computes in float64, 'train' in float32.

    One graph must stay in a single mode; the per-op dtype check enforces it.
    """

    MODES = {"test": np.float64, "train": np.float32}

    def __init__(self, mode: str = "test"):
        if mode not in self.MODES:
            raise ValueError(f"unknown precision mode {mode!r}")
        self.mode = mode

    @property
    def dtype(self):
        return self.MODES[self.mode]

    def __repr__(self):
        return f"PrecisionPolicy({self.mode!r})"


class Tape:
    """Ordered record of graph nodes; creation order is topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _STACK.stack.append(self)
        return self

    def __exit__(self, *exc):
        top = _STACK.stack.pop()
        assert top is self
        return False


class _NoGrad:
    """Sentinel context: ops compute values but record nothing."""

    def __enter__(self):
        _STACK.stack.append(None)
        return self

    def __exit__(self, *exc):
        _STACK.stack.pop()
        return False


def no_grad():
    return _NoGrad()


class _Stack(threading.local):
    def __init__(self):
        self.stack = []


_STACK = _Stack()


def _active_tape() -> Tape | None:
    return _STACK.stack[-1] if _STACK.stack else None


class Tensor:
    """Shaped float array, optionally recorded as a node on a tape."""

    __slots__ = ("values", "tape", "node_id", "op", "parents", "_vjp")

    def __init__(self, values, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor created with non-finite values")
        self.values = arr
        self.tape = None
        self.node_id = None
        self.op = "leaf"
        self.parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # Operator sugar over the primitive functions below.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return crop(self, _normalize_key(self, key))

    def sum(self):
        return sum_all(self)


def tensor(values, dtype=None) -> Tensor:
    return Tensor(values, dtype=dtype)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _record(op: str, values: np.ndarray, parents: tuple, vjp) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite result from primitive {op!r}")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.op = op
    tape = _active_tape()
    if tape is None:
        out.tape = None
        out.node_id = None
        out.parents = ()
        out._vjp = None
        return out
    for p in parents:
        if p.tape is not None and p.tape is not tape:
            raise TapeMismatchError(
                f"input of {op!r} belongs to a different tape"
            )
    out.tape = tape
    out.node_id = len(tape.nodes)
    out.parents = parents
    out._vjp = vjp
    tape.nodes.append(out)
    return out


def _check_same_dtype(op, *ts):
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise ShapeError(f"{op}: mixed dtypes {d} and {t.dtype} in one graph")


def _const_like(t: Tensor, values) -> Tensor:
    return Tensor(np.asarray(values, dtype=t.dtype))


# ---------------------------------------------------------------------------
# Primitives.  Each vjp is a composition of primitives, so it is recorded on
# the tape whenever recording is active and the result stays differentiable.
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def vjp(g):
        return g, g

    return _record("add", a.values + b.values, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

    def vjp(g):
        return g, scale(g, -1.0)

    return _record("sub", a.values - b.values, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def vjp(g):
        return mul(g, b), mul(g, a)

    return _record("mul", a.values * b.values, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (scale(g, c),)

    return _record("scale", a.values * a.dtype.type(c), (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} do not conform")

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _record("matmul", a.values @ b.values, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {a.shape}")

    def vjp(g):
        return (transpose(g),)

    return _record("transpose", np.ascontiguousarray(a.values.T), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.values.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape

    def vjp(g):
        return (reshape(g, old),)

    return _record("reshape", a.values.reshape(shape), (a,), vjp)


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """(B, N) + (N,) row-broadcast add, the bias pattern of the networks."""
    _check_same_dtype("add_rowvec", m, v)
    if m.values.ndim != 2 or v.values.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {m.shape} and {v.shape}")

    def vjp(g):
        return g, colsum(g)

    return _record("add_rowvec", m.values + v.values, (m, v), vjp)


def colsum(m: Tensor) -> Tensor:
    """(B, N) -> (N,), sum over rows."""
    if m.values.ndim != 2:
        raise ShapeError(f"colsum: expected rank 2, got {m.shape}")
    rows = m.shape[0]

    def vjp(g):
        return (broadcast_rows(g, rows),)

    return _record("colsum", m.values.sum(axis=0), (m,), vjp)


def broadcast_rows(v: Tensor, rows: int) -> Tensor:
    """(N,) -> (rows, N), each row a copy of v."""
    if v.values.ndim != 1:
        raise ShapeError(f"broadcast_rows: expected rank 1, got {v.shape}")

    def vjp(g):
        return (colsum(g),)

    out = np.broadcast_to(v.values, (int(rows), v.shape[0])).copy()
    return _record("broadcast_rows", out, (v,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    with np.errstate(over="ignore"):
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    y = y.astype(a.dtype, copy=False)

    # The rule needs the output node itself; bind it after recording.
    holder = {}

    def vjp(g):
        y_node = holder["out"]
        t = mul(g, y_node)
        return (sub(t, mul(t, y_node)),)

    out = _record("sigmoid", y, (a,), vjp)
    holder["out"] = out
    return out


def tanh(a: Tensor) -> Tensor:
    holder = {}

    def vjp(g):
        y_node = holder["out"]
        return (sub(g, mul(g, mul(y_node, y_node))),)

    out = _record("tanh", np.tanh(a.values), (a,), vjp)
    holder["out"] = out
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.values
    # Slope at exactly 0 uses the positive side (measure-zero choice).
    mask = np.where(x >= 0, x.dtype.type(1.0), x.dtype.type(slope))

    def vjp(g):
        return (mul(g, Tensor(mask)),)

    return _record("leaky_relu", x * mask, (a,), vjp)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: empty input list")
    _check_same_dtype("concat", *parts)
    nd = parts[0].values.ndim
    if axis < 0 or axis >= nd:
        raise ShapeError(f"concat: axis {axis} out of range for rank {nd}")
    for p in parts[1:]:
        if p.values.ndim != nd:
            raise ShapeError("concat: rank mismatch")
        for ax in range(nd):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise ShapeError("concat: off-axis extents differ")
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts]).tolist()
    shapes = [p.shape for p in parts]

    def vjp(g):
        grads = []
        for i, shp in enumerate(shapes):
            bounds = tuple(
                (offsets[i], offsets[i + 1]) if ax == axis else (0, shp[ax])
                for ax in range(nd)
            )
            grads.append(crop(g, bounds))
        return tuple(grads)

    out = np.concatenate([p.values for p in parts], axis=axis)
    return _record("concat", out, tuple(parts), vjp)


def _normalize_key(t: Tensor, key):
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > t.values.ndim:
        raise ShapeError("slice: too many indices")
    bounds = []
    for ax in range(t.values.ndim):
        if ax < len(key):
            k = key[ax]
            if not isinstance(k, slice) or k.step not in (None, 1):
                raise ShapeError("slice: only unit-step ranges are supported")
            start, stop, _ = k.indices(t.shape[ax])
        else:
            start, stop = 0, t.shape[ax]
        bounds.append((start, stop))
    return tuple(bounds)


def crop(a: Tensor, bounds) -> Tensor:
    """Rectangular slice; bounds is one (start, stop) pair per axis."""
    bounds = tuple((int(s), int(e)) for s, e in bounds)
    if len(bounds) != a.values.ndim:
        raise ShapeError(f"slice: need {a.values.ndim} bound pairs, got {len(bounds)}")
    for ax, (s, e) in enumerate(bounds):
        if not (0 <= s <= e <= a.shape[ax]):
            raise ShapeError(f"slice: bounds {bounds[ax]} invalid on axis {ax} of {a.shape}")
    full = a.shape

    def vjp(g):
        return (pad_zeros(g, full, bounds),)

    key = tuple(slice(s, e) for s, e in bounds)
    return _record("slice", np.ascontiguousarray(a.values[key]), (a,), vjp)


def pad_zeros(a: Tensor, full_shape, bounds) -> Tensor:
    """Embed a into a zero tensor of full_shape at the given bounds."""
    full_shape = tuple(int(s) for s in full_shape)
    bounds = tuple((int(s), int(e)) for s, e in bounds)
    for ax, (s, e) in enumerate(bounds):
        if e - s != a.shape[ax] or not (0 <= s <= e <= full_shape[ax]):
            raise ShapeError("pad: bounds inconsistent with input shape")

    def vjp(g):
        return (crop(g, bounds),)

    out = np.zeros(full_shape, dtype=a.dtype)
    out[tuple(slice(s, e) for s, e in bounds)] = a.values
    return _record("pad", out, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def vjp(g):
        return (expand_scalar(g, shape),)

    return _record("sum", np.asarray(a.values.sum(), dtype=a.dtype), (a,), vjp)


def expand_scalar(s: Tensor, shape) -> Tensor:
    if s.values.ndim != 0:
        raise ShapeError(f"expand: expected a scalar, got shape {s.shape}")
    shape = tuple(int(x) for x in shape)

    def vjp(g):
        return (sum_all(g),)

    out = np.full(shape, s.values, dtype=s.dtype)
    return _record("expand", out, (s,), vjp)


def abs_pow(a: Tensor, p: float) -> Tensor:
    """Elementwise |x|**p.  Derivative at 0 is taken as 0 for p > 1."""
    p = float(p)

    def vjp(g):
        return (scale(mul(g, signed_abs_pow(a, p - 1.0)), p),)

    with np.errstate(divide="ignore"):
        out = np.abs(a.values) ** a.dtype.type(p)
    return _record("abs_pow", out, (a,), vjp)


def signed_abs_pow(a: Tensor, p: float) -> Tensor:
    """Elementwise sign(x) * |x|**p; the odd partner of abs_pow."""
    p = float(p)

    def vjp(g):
        return (scale(mul(g, abs_pow(a, p - 1.0)), p),)

    x = a.values
    with np.errstate(divide="ignore"):
        out = np.sign(x) * np.abs(x) ** a.dtype.type(p)
    return _record("signed_abs_pow", out, (a,), vjp)


def pow_scalar(a: Tensor, q: float) -> Tensor:
    """x**q for a positive scalar tensor (used by norm backward rules)."""
    if a.values.ndim != 0:
        raise ShapeError("pow_scalar: expected a scalar")
    if a.values <= 0:
        raise NumericError("pow_scalar: base must be positive")
    q = float(q)

    def vjp(g):
        return (scale(mul(g, pow_scalar(a, q - 1.0)), q),)

    return _record("pow_scalar", np.asarray(a.values ** a.dtype.type(q)), (a,), vjp)


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm over all entries; gradient at the zero vector is zero."""
    shape = a.shape
    holder = {}

    def vjp(g):
        y = holder["out"]
        if y.values == 0.0:
            return (Tensor(np.zeros(shape, dtype=a.dtype)),)
        u = mul(g, pow_scalar(y, -1.0))
        return (mul(expand_scalar(u, shape), a),)

    out = _record("l2_norm", np.asarray(np.sqrt((a.values ** 2).sum()), dtype=a.dtype), (a,), vjp)
    holder["out"] = out
    return out


def rowsum(m: Tensor) -> Tensor:
    """(B, N) -> (B,), sum over columns; composite of colsum/transpose."""
    return colsum(transpose(m))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.values.size)


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "add_rowvec": add_rowvec,
    "colsum": colsum,
    "broadcast_rows": broadcast_rows,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
    "concat": concat,
    "slice": crop,
    "pad": pad_zeros,
    "sum": sum_all,
    "expand": expand_scalar,
    "abs_pow": abs_pow,
    "signed_abs_pow": signed_abs_pow,
    "pow_scalar": pow_scalar,
    "l2_norm": l2_norm,
}


def apply_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch a primitive by name; the uniform entry point for the op set."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Backward traversal.
# ---------------------------------------------------------------------------


def gradient(output: Tensor, wrt, *, create_graph: bool = True, missing: str = "error"):
    """d(output)/d(each wrt tensor) by reverse traversal of the tape.

    With create_graph (the default) the returned tensors are graph nodes and
    can be differentiated again.  missing='zeros' returns a zero tensor for
    wrt entries the output does not depend on instead of raising.
    """
    if output.values.ndim != 0:
        raise ShapeError(f"gradient: output must be scalar, got shape {output.shape}")
    if output.tape is None:
        raise NotInGraphError("gradient: output is not recorded on a tape")
    if missing not in ("error", "zeros"):
        raise ValueError("missing must be 'error' or 'zeros'")
    wrt = list(wrt)

    tape = output.tape
    adjoints: dict[int, Tensor] = {id(output): _const_like(output, 1.0)}
    ctx = tape if create_graph else _NoGrad()
    with ctx:
        for idx in range(output.node_id, -1, -1):
            node = tape.nodes[idx]
            g = adjoints.get(id(node))
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                acc = adjoints.get(id(parent))
                adjoints[id(parent)] = pg if acc is None else add(acc, pg)

    results = []
    for w in wrt:
        g = adjoints.get(id(w))
        if g is None:
            if missing == "error":
                raise NotInGraphError(
                    "gradient: a wrt tensor is not reachable from the output"
                )
            g = Tensor(np.zeros(w.shape, dtype=w.dtype))
        results.append(g)
    return results


# ---------------------------------------------------------------------------
# Initialization and the Adam optimizer.
# ---------------------------------------------------------------------------


def init_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from a seeded generator."""
    bound = 1.0 / np.sqrt(float(fan_in))
    vals = rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)
    return Tensor(vals)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    vals = [_values_of(p) for p in params]
    return AdamState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        step=0,
        m=[np.zeros_like(v) for v in vals],
        v=[np.zeros_like(v) for v in vals],
    )


def _values_of(p):
    return p.values if isinstance(p, Tensor) else np.asarray(p)


def adam_step(params, grads, state: AdamState):
    """One Adam update with bias correction; returns (new values, state)."""
    pv = [_values_of(p) for p in params]
    gv = [_values_of(g) for g in grads]
    if len(pv) != len(gv) or len(pv) != len(state.m):
        raise ShapeError("adam_step: parameter/gradient/state counts differ")
    for p, g in zip(pv, gv):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("adam_step: non-finite gradient entries")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(pv, gv)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out, state


def clip_gradients(grads, max_norm: float):
    """Scale the gradient list so its global L2 norm is at most max_norm.

    max_norm <= 0 disables clipping.
    """
    gv = [_values_of(g) for g in grads]
    if max_norm <= 0:
        return gv
    total = np.sqrt(sum(float((g ** 2).sum()) for g in gv))
    if total <= max_norm:
        return gv
    factor = max_norm / total
    return [g * factor for g in gv]
