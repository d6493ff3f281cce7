"""Reverse-mode automatic differentiation on a flat numpy tape.

Values are float64 numpy arrays. A :class:`Tape` records primitive
operations in topological order; :func:`backward` walks the tape once in
reverse and accumulates adjoints. Anything that is not a :class:`Var` is
treated as a constant and captured in the closure of the node's vjp, so
only gradient-carrying data ever lands on the tape.

Second-order support is deliberately narrow: losses in this codebase need
derivatives *through* spatial gradients of a scalar field (surface normals,
eikonal penalties), never general higher-order derivatives. That path is
covered by :class:`Dual`, a forward-mode pair whose tangent arithmetic is
itself expressed in recorded tape ops. Differentiating a spatial gradient
with respect to network parameters is then just an ordinary reverse sweep
over the tangent subgraph. See :func:`spatial_gradient`.

Non-finite values fail fast: every node is checked on creation and every
adjoint on the way back, and the error names the offending op and node
index. Silent NaN propagation tends to hide field collapse until much
later in training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

Arrayish = Union[np.ndarray, float, int]


class AutodiffError(RuntimeError):
    pass


class NonFiniteError(AutodiffError):
    """Raised when a forward value or an adjoint stops being finite."""

    def __init__(self, where: str, op: str, index: int):
        super().__init__(f"non-finite values in {where} of op '{op}' (node {index})")
        self.op = op
        self.index = index


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Ordered record of primitive ops; single-owner during recording."""

    __slots__ = ("_values", "_parents", "_vjps", "_ops", "check_finite")

    def __init__(self, check_finite: bool = True):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        # vjp: adjoint -> tuple of parent adjoints (None entries allowed)
        self._vjps: list[Callable | None] = []
        self._ops: list[str] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self._values)

    def _append(self, value: np.ndarray, parents: tuple[int, ...],
                vjp: Callable | None, op: str) -> "Var":
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError("forward value", op, len(self._values))
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._ops.append(op)
        return Var(self, len(self._values) - 1)

    def var(self, value: Arrayish, op: str = "leaf") -> "Var":
        """Record a leaf. Leaves have no vjp; their adjoint is the result."""
        return self._append(_asarray(value), (), None, op)


class Var:
    """Handle to one tape node. All arithmetic records new nodes."""

    __slots__ = ("tape", "idx")

    # make numpy defer to our reflected operators instead of coercing
    __array_ufunc__ = None

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.idx]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __array__(self, dtype=None, copy=None):
        return np.array(self.value, dtype=dtype)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"

    # -- arithmetic ---------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise AutodiffError("no Var operand; nothing to record")


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else _asarray(x)


# -- primitive builders ------------------------------------------------

def _unary(x: Var, out: np.ndarray, dvjp: Callable[[np.ndarray], np.ndarray],
           op: str) -> Var:
    return x.tape._append(out, (x.idx,), lambda adj: (dvjp(adj),), op)


def _binary(a, b, out: np.ndarray, da: Callable, db: Callable, op: str) -> Var:
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if isinstance(a, Var) and isinstance(b, Var):
        def vjp(adj):
            return (_unbroadcast(da(adj), av.shape),
                    _unbroadcast(db(adj), bv.shape))
        return tape._append(out, (a.idx, b.idx), vjp, op)
    if isinstance(a, Var):
        return tape._append(out, (a.idx,),
                            lambda adj: (_unbroadcast(da(adj), av.shape),), op)
    return tape._append(out, (b.idx,),
                        lambda adj: (_unbroadcast(db(adj), bv.shape),), op)


# -- elementwise ops ---------------------------------------------------

def add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _dual_add(a, b)
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return _val(a) + _val(b)
    return _binary(a, b, _val(a) + _val(b), lambda g: g, lambda g: g, "add")


def sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _dual_add(a, _dual_neg(b))
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return _val(a) - _val(b)
    return _binary(a, b, _val(a) - _val(b), lambda g: g, lambda g: -g, "sub")


def mul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _dual_mul(a, b)
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return _val(a) * _val(b)
    av, bv = _val(a), _val(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av, "mul")


def div(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _dual_div(a, b)
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return _val(a) / _val(b)
    av, bv = _val(a), _val(b)
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv, "div")


def neg(x):
    if isinstance(x, Dual):
        return _dual_neg(x)
    if not isinstance(x, Var):
        return -_val(x)
    return _unary(x, -x.value, lambda g: -g, "neg")


def power(x, p: float):
    if isinstance(x, Dual):
        v = power(x.val, p)
        return Dual(v, None if x.tan is None
                    else mul(x.tan, mul(power(x.val, p - 1.0), float(p))))
    if not isinstance(x, Var):
        return _val(x) ** p
    xv = x.value
    return _unary(x, xv ** p, lambda g: g * p * xv ** (p - 1.0), f"pow{p}")


def matmul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _dual_matmul(a, b)
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return _val(a) @ _val(b)
    av, bv = _val(a), _val(b)
    return _binary(a, b, av @ bv,
                   lambda g: g @ np.swapaxes(bv, -1, -2),
                   lambda g: np.swapaxes(av, -1, -2) @ g, "matmul")


def absolute(x):
    """|x| with sign(0) = 0 subgradient."""
    if isinstance(x, Dual):
        return Dual(absolute(x.val),
                    None if x.tan is None else mul(x.tan, np.sign(_val(x.val))))
    if not isinstance(x, Var):
        return np.abs(_val(x))
    xv = x.value
    return _unary(x, np.abs(xv), lambda g: g * np.sign(xv), "abs")


def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.val), None if x.tan is None else mul(x.tan, cos(x.val)))
    if not isinstance(x, Var):
        return np.sin(_val(x))
    xv = x.value
    return _unary(x, np.sin(xv), lambda g: g * np.cos(xv), "sin")


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.val), None if x.tan is None else mul(x.tan, neg(sin(x.val))))
    if not isinstance(x, Var):
        return np.cos(_val(x))
    xv = x.value
    return _unary(x, np.cos(xv), lambda g: -g * np.sin(xv), "cos")


def exp(x):
    if isinstance(x, Dual):
        e = exp(x.val)
        return Dual(e, None if x.tan is None else mul(x.tan, e))
    if not isinstance(x, Var):
        return np.exp(_val(x))
    out = np.exp(x.value)
    return _unary(x, out, lambda g: g * out, "exp")


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.val), None if x.tan is None else div(x.tan, x.val))
    if not isinstance(x, Var):
        return np.log(_val(x))
    xv = x.value
    return _unary(x, np.log(xv), lambda g: g / xv, "log")


def sqrt(x):
    if isinstance(x, Dual):
        s = sqrt(x.val)
        return Dual(s, None if x.tan is None else div(x.tan, mul(s, 2.0)))
    if not isinstance(x, Var):
        return np.sqrt(_val(x))
    out = np.sqrt(x.value)
    return _unary(x, out, lambda g: g * 0.5 / out, "sqrt")


def tanh(x):
    if isinstance(x, Dual):
        t = tanh(x.val)
        return Dual(t, None if x.tan is None
                    else mul(x.tan, sub(1.0, mul(t, t))))
    if not isinstance(x, Var):
        return np.tanh(_val(x))
    out = np.tanh(x.value)
    return _unary(x, out, lambda g: g * (1.0 - out * out), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable on both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    if isinstance(x, Dual):
        s = sigmoid(x.val)
        return Dual(s, None if x.tan is None
                    else mul(x.tan, mul(s, sub(1.0, s))))
    if not isinstance(x, Var):
        return _sigmoid_np(_asarray(x))
    out = _sigmoid_np(x.value)
    return _unary(x, out, lambda g: g * out * (1.0 - out), "sigmoid")


def softplus(x, beta: float = 100.0):
    """log(1 + exp(beta*x)) / beta, stable on both tails."""
    if isinstance(x, Dual):
        return Dual(softplus(x.val, beta),
                    None if x.tan is None
                    else mul(x.tan, sigmoid(mul(x.val, beta))))
    if not isinstance(x, Var):
        return np.logaddexp(0.0, beta * _val(x)) / beta
    xv = x.value
    out = np.logaddexp(0.0, beta * xv) / beta
    return _unary(x, out, lambda g: g * _sigmoid_np(beta * xv), "softplus")


def relu(x):
    if isinstance(x, Dual):
        gate = (_val(x.val) > 0).astype(np.float64)
        return Dual(relu(x.val), None if x.tan is None else mul(x.tan, gate))
    if not isinstance(x, Var):
        return np.maximum(_val(x), 0.0)
    xv = x.value
    return _unary(x, np.maximum(xv, 0.0),
                  lambda g: g * (xv > 0), "relu")


def clip(x, lo: float, hi: float):
    """Clamp to [lo, hi]; zero gradient outside the interval."""
    if not isinstance(x, Var):
        return np.clip(_val(x), lo, hi)
    xv = x.value
    inside = ((xv > lo) & (xv < hi)).astype(np.float64)
    return _unary(x, np.clip(xv, lo, hi), lambda g: g * inside, "clip")


# -- shape ops ---------------------------------------------------------

def reshape(x, shape):
    if isinstance(x, Dual):
        raise AutodiffError("reshape of Dual is ambiguous; reshape val/tan explicitly")
    if not isinstance(x, Var):
        return _val(x).reshape(shape)
    old = x.value.shape
    return _unary(x, x.value.reshape(shape), lambda g: g.reshape(old), "reshape")


def transpose(x, axes):
    if not isinstance(x, Var):
        return np.transpose(_val(x), axes)
    inv = np.argsort(axes)
    return _unary(x, np.transpose(x.value, axes),
                  lambda g: np.transpose(g, inv), "transpose")


def broadcast_to(x, shape):
    if not isinstance(x, Var):
        return np.broadcast_to(_val(x), shape)
    old = x.value.shape
    return _unary(x, np.broadcast_to(x.value, shape).copy(),
                  lambda g: _unbroadcast(g, old), "broadcast")


def take(x, key):
    """Static indexing/slicing; gradient scatters back into zeros."""
    if isinstance(x, Dual):
        if not (isinstance(key, tuple) and key and key[0] is Ellipsis):
            raise AutodiffError("Dual indexing must use x[..., slice] form")
        return Dual(take(x.val, key),
                    None if x.tan is None else take(x.tan, key))
    if not isinstance(x, Var):
        return _val(x)[key]
    xv = x.value

    def vjp(adj):
        g = np.zeros_like(xv)
        np.add.at(g, key, adj)
        return (g,)

    return x.tape._append(xv[key], (x.idx,), vjp, "take")


def concat(parts: Sequence, axis: int = -1):
    if any(isinstance(p, Dual) for p in parts):
        return _dual_concat(parts, axis)
    vars_ = [p for p in parts if isinstance(p, Var)]
    if not vars_:
        return np.concatenate([_val(p) for p in parts], axis=axis)
    tape = vars_[0].tape
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    ax = axis if axis >= 0 else out.ndim + axis
    var_slots = [i for i, p in enumerate(parts) if isinstance(p, Var)]

    def vjp(adj):
        grads = []
        for i in var_slots:
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(offsets[i], offsets[i + 1])
            grads.append(adj[tuple(sl)])
        return tuple(grads)

    return tape._append(out, tuple(parts[i].idx for i in var_slots), vjp, "concat")


def sum_(x, axis=None, keepdims=False):
    if not isinstance(x, Var):
        return np.sum(_val(x), axis=axis, keepdims=keepdims)
    xv = x.value
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def vjp(adj):
        g = _asarray(adj)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return x.tape._append(np.asarray(out, dtype=np.float64), (x.idx,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    xv = _val(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def l2norm(x, axis=-1, keepdims=False):
    """Euclidean norm along `axis`; subgradient is 0 at the origin."""
    if not isinstance(x, Var):
        return np.linalg.norm(_val(x), axis=axis, keepdims=keepdims)
    xv = x.value
    out = np.linalg.norm(xv, axis=axis, keepdims=keepdims)

    def vjp(adj):
        g = _asarray(adj)
        if not keepdims:
            g = np.expand_dims(g, axis)
            nrm = np.expand_dims(out, axis)
        else:
            nrm = out
        safe = np.where(nrm > 0.0, nrm, 1.0)
        return (g * np.where(nrm > 0.0, xv / safe, 0.0),)

    return x.tape._append(out, (x.idx,), vjp, "l2norm")


def stack(parts: Sequence, axis: int = 0):
    expanded = []
    for p in parts:
        if isinstance(p, Var):
            newshape = list(p.shape)
            newshape.insert(axis if axis >= 0 else len(newshape) + axis + 1, 1)
            expanded.append(reshape(p, tuple(newshape)))
        else:
            expanded.append(np.expand_dims(_val(p), axis))
    return concat(expanded, axis=axis)


# -- dual numbers (forward mode over the tape) --------------------------

class Dual:
    """Forward-mode pair. `tan` may carry extra leading direction axes,
    and `None` stands for an identically-zero tangent."""

    __slots__ = ("val", "tan")

    __array_ufunc__ = None

    def __init__(self, val, tan):
        self.val = val
        self.tan = tan

    def __add__(self, other):
        return _dual_add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _dual_add(self, _dual_neg(other))

    def __rsub__(self, other):
        return _dual_add(_dual_neg(self), other)

    def __mul__(self, other):
        return _dual_mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _dual_div(self, other)

    def __rtruediv__(self, other):
        return _dual_div(other, self)

    def __matmul__(self, other):
        return _dual_matmul(self, other)

    def __rmatmul__(self, other):
        return _dual_matmul(other, self)

    def __neg__(self):
        return _dual_neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, key):
        return take(self, key)


def _as_dual(x) -> Dual:
    return x if isinstance(x, Dual) else Dual(x, None)


def _dual_neg(x):
    if not isinstance(x, Dual):
        return neg(x)
    return Dual(neg(x.val), None if x.tan is None else neg(x.tan))


def _dual_add(a, b):
    a, b = _as_dual(a), _as_dual(b)
    if a.tan is None:
        tan = b.tan
    elif b.tan is None:
        tan = a.tan
    else:
        tan = add(a.tan, b.tan)
    return Dual(add(a.val, b.val), tan)


def _dual_mul(a, b):
    a, b = _as_dual(a), _as_dual(b)
    terms = []
    if a.tan is not None:
        terms.append(mul(a.tan, b.val))
    if b.tan is not None:
        terms.append(mul(a.val, b.tan))
    tan = None if not terms else (terms[0] if len(terms) == 1 else add(*terms))
    return Dual(mul(a.val, b.val), tan)


def _dual_div(a, b):
    a, b = _as_dual(a), _as_dual(b)
    out = div(a.val, b.val)
    terms = []
    if a.tan is not None:
        terms.append(div(a.tan, b.val))
    if b.tan is not None:
        terms.append(neg(div(mul(out, b.tan), b.val)))
    tan = None if not terms else (terms[0] if len(terms) == 1 else add(*terms))
    return Dual(out, tan)


def _dual_matmul(a, b):
    a, b = _as_dual(a), _as_dual(b)
    terms = []
    if a.tan is not None:
        terms.append(matmul(a.tan, b.val))
    if b.tan is not None:
        terms.append(matmul(a.val, b.tan))
    tan = None if not terms else (terms[0] if len(terms) == 1 else add(*terms))
    return Dual(matmul(a.val, b.val), tan)


def _lead_shape(tan, val) -> tuple[int, ...]:
    tv, vv = _val(tan), _val(val)
    return tv.shape[:tv.ndim - vv.ndim]


def _dual_concat(parts, axis):
    parts = [_as_dual(p) for p in parts]
    lead = None
    for p in parts:
        if p.tan is not None:
            lead = _lead_shape(p.tan, p.val)
            break
    if lead is None:
        return Dual(concat([p.val for p in parts], axis=axis), None)
    tans = []
    for p in parts:
        vshape = _val(p.val).shape
        if p.tan is None:
            tans.append(np.zeros(lead + vshape))
        else:
            tans.append(broadcast_to(p.tan, lead + vshape))
    return Dual(concat([p.val for p in parts], axis=axis),
                concat(tans, axis=axis))


# -- backward pass and high-level API -----------------------------------

def backward(loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Reverse sweep from a scalar `loss`; returns one gradient per `wrt`
    entry (zeros when no path exists)."""
    if loss.value.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    for v in wrt:
        if v.tape is not tape:
            raise AutodiffError("tracked variable recorded on a different tape")
    adjoints: list[np.ndarray | None] = [None] * (loss.idx + 1)
    adjoints[loss.idx] = np.ones_like(loss.value)
    check = tape.check_finite
    for i in range(loss.idx, -1, -1):
        adj = adjoints[i]
        if adj is None:
            continue
        vjp = tape._vjps[i]
        if vjp is None:
            continue
        grads = vjp(adj)
        for p, g in zip(tape._parents[i], grads):
            if g is None:
                continue
            if check and not np.all(np.isfinite(g)):
                raise NonFiniteError("adjoint", tape._ops[i], i)
            if adjoints[p] is None:
                adjoints[p] = g
            else:
                adjoints[p] = adjoints[p] + g
        adjoints[i] = None  # free as we go
    out = []
    for v in wrt:
        g = adjoints[v.idx] if v.idx <= loss.idx else None
        out.append(np.zeros_like(v.value) if g is None else g)
    return out


@dataclass
class GradientResult:
    value: float
    grads: dict[str, np.ndarray]


def value_and_grad(fn: Callable[[dict[str, Var]], Var],
                   inputs: dict[str, Arrayish],
                   check_finite: bool = True) -> GradientResult:
    """Record fn on a fresh tape and differentiate its scalar output with
    respect to every entry of `inputs`.

    Raises if some input never participates in the recording, which almost
    always means a wiring bug rather than a legitimately-zero gradient.
    """
    tape = Tape(check_finite=check_finite)
    vars_ = {k: tape.var(v, op=f"leaf:{k}") for k, v in inputs.items()}
    out = fn(vars_)
    if not isinstance(out, Var):
        raise AutodiffError("recorded function must return a Var")
    if out.value.size != 1:
        raise AutodiffError(f"recorded function must return a scalar, got {out.shape}")
    used = set()
    for parents in tape._parents:
        used.update(parents)
    for k, v in vars_.items():
        if v.idx not in used and v.idx != out.idx:
            raise AutodiffError(f"tracked variable '{k}' did not participate in the graph")
    grads = backward(out, list(vars_.values()))
    return GradientResult(value=float(out.value),
                          grads={k: g for k, g in zip(vars_, grads)})


def spatial_gradient(field_fn: Callable, x, tape: Tape | None = None):
    """Gradient of a scalar field with respect to its 3D input points.

    `field_fn` maps an (N, 3) point batch (Var, Dual or ndarray) to (N,) or
    (N, 1) scalars using ops from this module. Returns `(value, grad)`;
    when recording on a tape both are Vars and `grad` (N, 3) is itself
    differentiable, so eikonal and normal losses backpropagate into any
    parameters captured by `field_fn`.
    """
    if isinstance(x, Var):
        tape = x.tape
        xv = x.value
        x_node = x
    else:
        xv = _asarray(x)
        x_node = None
    squeeze = xv.ndim == 1
    if squeeze:
        xv = xv[None, :]
        if x_node is not None:
            x_node = reshape(x_node, (1, 3))
    n = xv.shape[0]
    seed = np.broadcast_to(np.eye(3)[:, None, :], (3, n, 3)).copy()
    if tape is None:
        # plain numpy forward-mode, no recording
        out = field_fn(Dual(xv, seed))
        val, tan = _val(out.val), _val(out.tan)
    else:
        point = x_node if x_node is not None else tape.var(xv, op="probe-points")
        out = field_fn(Dual(point, tape.var(seed, op="grad-seed")))
        val, tan = out.val, out.tan
    # tangent has shape (3, N) or (3, N, 1); rearrange to (N, 3)
    if tape is None:
        grad = np.moveaxis(tan.reshape(3, n), 0, 1)
        if squeeze:
            return val.reshape(()) if val.size == 1 else val[0], grad[0]
        return val.reshape(n), grad
    grad = transpose(reshape(tan, (3, n)), (1, 0))
    val = reshape(val, (n,))
    if squeeze:
        return reshape(val, ()), reshape(grad, (3,))
    return val, grad


def finite_diff_check(f: Callable, point: Arrayish, eps: float = 1e-5) -> float:
    """Max relative disagreement between central differences and the
    recorded gradient of scalar `f` at `point`."""
    p = _asarray(point)
    res = value_and_grad(lambda v: f(v["x"]), {"x": p})
    g = res.grads["x"].ravel()
    flat = p.ravel()
    err = 0.0
    for i in range(flat.size):
        hi = flat.copy(); hi[i] += eps
        lo = flat.copy(); lo[i] -= eps
        fd = (float(_val(f(hi.reshape(p.shape)))) -
              float(_val(f(lo.reshape(p.shape))))) / (2.0 * eps)
        err = max(err, abs(fd - g[i]) / (abs(g[i]) + 1e-12))
    return err
