"""Dense float64 linear algebra with a reverse-mode tape and SGD-with-momentum.

Everything is stored in numpy arrays. A ``Tape`` records array-valued
operations as they execute; since an operation's inputs always exist before
its output, creation order is a valid topological order and the backward
pass is a single reverse sweep that touches each node exactly once.

Gradients are never accumulated in place (`p.grad = p.grad + g`, not `+=`),
so backward closures may hand out views of their incoming adjoint without
aliasing bugs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class DimensionMismatch(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A value that must be finite contains NaN or Inf."""


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(a, what: str = "array") -> np.ndarray:
    a = np.asarray(a)
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{what} contains non-finite entries")
    return a


class Var:
    """One tape node: a float64 array plus adjoint bookkeeping."""

    __slots__ = ("tape", "value", "op", "requires_grad", "grad", "_backward")

    def __init__(self, tape, value, op, requires_grad, backward=None):
        self.tape = tape
        self.value = value
        self.op = op
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"

    # operator sugar; definitions live at module level
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def square(self):
        return square(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


class Tape:
    """Operation recorder for one forward pass / backward sweep."""

    def __init__(self):
        self.nodes: list[Var] = []

    def param(self, value, name: str | None = None) -> Var:
        """Leaf with gradient tracking (a trainable tensor)."""
        return self._push(_f64(value), name or "param", True, None)

    def const(self, value, name: str | None = None) -> Var:
        """Leaf without gradient tracking (data)."""
        return self._push(_f64(value), name or "const", False, None)

    def _push(self, value, op, requires_grad, backward) -> Var:
        node = Var(self, value, op, requires_grad, backward)
        self.nodes.append(node)
        return node

    def backward(self, output: Var) -> None:
        """Reverse sweep from a scalar output; fills .grad on every ancestor."""
        if output.tape is not self:
            raise ValueError("output node belongs to a different tape")
        if output.value.size != 1:
            raise DimensionMismatch(
                f"backward requires a scalar output, got shape {output.value.shape}"
            )
        output.grad = np.ones_like(output.value)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


def _acc(p: Var, g) -> None:
    # fresh array on accumulation keeps handed-out views safe
    if p.grad is None:
        p.grad = g
    else:
        p.grad = p.grad + g


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("expected at least one Var operand")


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Var:
    tape = _tape_of(a, b)
    if isinstance(a, Var) and isinstance(b, Var):
        if a.value.shape != b.value.shape:
            raise DimensionMismatch(f"add: {a.value.shape} vs {b.value.shape}")
        out = tape._push(a.value + b.value, "add", a.requires_grad or b.requires_grad, None)

        def backward(g):
            if a.requires_grad:
                _acc(a, g)
            if b.requires_grad:
                _acc(b, g)

        out._backward = backward
        return out
    v, c = (a, b) if isinstance(a, Var) else (b, a)
    out = tape._push(v.value + float(c), "add", v.requires_grad, None)
    if v.requires_grad:
        out._backward = lambda g: _acc(v, g)
    return out


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    if isinstance(a, Var) and isinstance(b, Var):
        if a.value.shape != b.value.shape:
            raise DimensionMismatch(f"sub: {a.value.shape} vs {b.value.shape}")
        out = tape._push(a.value - b.value, "sub", a.requires_grad or b.requires_grad, None)

        def backward(g):
            if a.requires_grad:
                _acc(a, g)
            if b.requires_grad:
                _acc(b, -g)

        out._backward = backward
        return out
    if isinstance(a, Var):
        return add(a, -float(b))
    return rsub(a, b)


def rsub(c, v: Var) -> Var:
    """c - v for scalar c."""
    out = v.tape._push(float(c) - v.value, "rsub", v.requires_grad, None)
    if v.requires_grad:
        out._backward = lambda g: _acc(v, -g)
    return out


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    if isinstance(a, Var) and isinstance(b, Var):
        if a.value.shape != b.value.shape:
            raise DimensionMismatch(f"mul: {a.value.shape} vs {b.value.shape}")
        out = tape._push(a.value * b.value, "mul", a.requires_grad or b.requires_grad, None)

        def backward(g):
            if a.requires_grad:
                _acc(a, g * b.value)
            if b.requires_grad:
                _acc(b, g * a.value)

        out._backward = backward
        return out
    v, c = (a, b) if isinstance(a, Var) else (b, a)
    s = float(c)
    out = tape._push(v.value * s, "scale", v.requires_grad, None)
    if v.requires_grad:
        out._backward = lambda g: _acc(v, g * s)
    return out


def relu(x: Var) -> Var:
    out = x.tape._push(np.maximum(x.value, 0.0), "relu", x.requires_grad, None)
    if x.requires_grad:
        out._backward = lambda g: _acc(x, g * (x.value > 0.0))
    return out


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    out = x.tape._push(y, "tanh", x.requires_grad, None)
    if x.requires_grad:
        out._backward = lambda g: _acc(x, g * (1.0 - y * y))
    return out


def exp(x: Var) -> Var:
    y = np.exp(x.value)
    out = x.tape._push(y, "exp", x.requires_grad, None)
    if x.requires_grad:
        out._backward = lambda g: _acc(x, g * y)
    return out


def square(x: Var) -> Var:
    out = x.tape._push(x.value * x.value, "square", x.requires_grad, None)
    if x.requires_grad:
        out._backward = lambda g: _acc(x, g * (2.0 * x.value))
    return out


def sum_all(x: Var) -> Var:
    out = x.tape._push(np.asarray(x.value.sum()), "sum", x.requires_grad, None)
    if x.requires_grad:
        out._backward = lambda g: _acc(x, np.broadcast_to(g, x.value.shape))
    return out


def mean_all(x: Var) -> Var:
    n = x.value.size
    out = x.tape._push(np.asarray(x.value.mean()), "mean", x.requires_grad, None)
    if x.requires_grad:
        out._backward = lambda g: _acc(x, np.broadcast_to(g / n, x.value.shape))
    return out


def mean_rows(x: Var) -> Var:
    """Mean over axis 0: [n, k] -> [k]."""
    if x.value.ndim != 2:
        raise DimensionMismatch(f"mean_rows expects a matrix, got shape {x.value.shape}")
    n = x.value.shape[0]
    out = x.tape._push(x.value.mean(axis=0), "mean_rows", x.requires_grad, None)
    if x.requires_grad:
        out._backward = lambda g: _acc(x, np.broadcast_to(g / n, x.value.shape))
    return out


def repeat_rows(z: Var, n: int) -> Var:
    """Tile a vector into n identical rows: [k] -> [n, k]."""
    if z.value.ndim != 1:
        raise DimensionMismatch(f"repeat_rows expects a vector, got shape {z.value.shape}")
    out = z.tape._push(
        np.broadcast_to(z.value, (n, z.value.shape[0])), "repeat_rows", z.requires_grad, None
    )
    if z.requires_grad:
        out._backward = lambda g: _acc(z, g.sum(axis=0))
    return out


def gather(x: Var, idx: np.ndarray) -> Var:
    """Pick entries of a vector by integer index array (with repeats)."""
    if x.value.ndim != 1:
        raise DimensionMismatch(f"gather expects a vector, got shape {x.value.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    n = x.value.shape[0]
    out = x.tape._push(x.value[idx], "gather", x.requires_grad, None)
    if x.requires_grad:
        # bincount is the fast scatter-add for repeated indices
        out._backward = lambda g: _acc(x, np.bincount(idx, weights=g, minlength=n))
    return out


def concat(parts: list[Var]) -> Var:
    """Concatenate 1-D vars."""
    if not parts:
        raise ValueError("concat of empty list")
    tape = parts[0].tape
    for p in parts:
        if p.value.ndim != 1:
            raise DimensionMismatch("concat expects vectors")
    offsets = np.cumsum([0] + [p.value.shape[0] for p in parts])
    req = any(p.requires_grad for p in parts)
    out = tape._push(np.concatenate([p.value for p in parts]), "concat", req, None)
    if req:

        def backward(g):
            for k, p in enumerate(parts):
                if p.requires_grad:
                    _acc(p, g[offsets[k]:offsets[k + 1]])

        out._backward = backward
    return out


def concat_cols(a: Var, b: Var) -> Var:
    """Column-wise concat of two matrices with equal row counts."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[0] != b.value.shape[0]:
        raise DimensionMismatch(f"concat_cols: {a.value.shape} vs {b.value.shape}")
    na = a.value.shape[1]
    req = a.requires_grad or b.requires_grad
    out = a.tape._push(np.hstack([a.value, b.value]), "concat_cols", req, None)
    if req:

        def backward(g):
            if a.requires_grad:
                _acc(a, g[:, :na])
            if b.requires_grad:
                _acc(b, g[:, na:])

        out._backward = backward
    return out


def slice1d(x: Var, start: int, stop: int) -> Var:
    if x.value.ndim != 1:
        raise DimensionMismatch("slice1d expects a vector")
    out = x.tape._push(x.value[start:stop], "slice1d", x.requires_grad, None)
    if x.requires_grad:

        def backward(g):
            z = np.zeros_like(x.value)
            z[start:stop] = g
            _acc(x, z)

        out._backward = backward
    return out


def squeeze_cols(x: Var) -> Var:
    """[n, 1] -> [n]."""
    if x.value.ndim != 2 or x.value.shape[1] != 1:
        raise DimensionMismatch(f"squeeze_cols expects [n, 1], got {x.value.shape}")
    n = x.value.shape[0]
    out = x.tape._push(x.value.reshape(n), "squeeze_cols", x.requires_grad, None)
    if x.requires_grad:
        out._backward = lambda g: _acc(x, g.reshape(n, 1))
    return out


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _affine_shapes(x_shape, w_shape, b_shape):
    if len(w_shape) != 2:
        raise DimensionMismatch(f"weight must be a matrix [out, in], got {w_shape}")
    o, i = w_shape
    if len(x_shape) == 1:
        if x_shape[0] != i:
            raise DimensionMismatch(f"input dim {x_shape[0]} != weight in-dim {i}")
    elif len(x_shape) == 2:
        if x_shape[1] != i:
            raise DimensionMismatch(f"input dim {x_shape[1]} != weight in-dim {i}")
    else:
        raise DimensionMismatch(f"input must be a vector or matrix, got {x_shape}")
    if b_shape is not None and b_shape != (o,):
        raise DimensionMismatch(f"bias shape {b_shape} != ({o},)")


def affine(x: Var, w: Var, b: Var | None) -> Var:
    """x @ w.T + b for batched x [n, i], or w @ x + b for a vector x [i]."""
    _affine_shapes(x.value.shape, w.value.shape, None if b is None else b.value.shape)
    tape = x.tape
    batched = x.value.ndim == 2
    y = x.value @ w.value.T if batched else w.value @ x.value
    if b is not None:
        y += b.value  # y is freshly allocated by the matmul
    req = x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    out = tape._push(y, "affine", req, None)
    if req:

        def backward(g):
            if batched:
                if w.requires_grad:
                    _acc(w, g.T @ x.value)
                if x.requires_grad:
                    _acc(x, g @ w.value)
                if b is not None and b.requires_grad:
                    _acc(b, g.sum(axis=0))
            else:
                if w.requires_grad:
                    _acc(w, np.outer(g, x.value))
                if x.requires_grad:
                    _acc(x, w.value.T @ g)
                if b is not None and b.requires_grad:
                    _acc(b, g)

        out._backward = backward
    return out


def _activate(h: Var, act: str) -> Var:
    if act == "relu":
        return relu(h)
    if act == "tanh":
        return tanh(h)
    if act == "identity":
        return h
    raise ValueError(f"unknown activation {act!r}; expected one of {ACTIVATIONS}")


def forward_fc(x, w, b, act: str = "identity"):
    """One fully connected layer act(Wx+b).

    With plain arrays this just computes; with ``Var`` operands the layer is
    recorded on their tape and participates in backward(). The output of the
    plain path is checked finite.
    """
    if act not in ACTIVATIONS:
        raise ValueError(f"unknown activation {act!r}; expected one of {ACTIVATIONS}")
    if isinstance(x, Var) or isinstance(w, Var) or isinstance(b, Var):
        tape = _tape_of(x, w, b)
        xv, wv = _lift(tape, x), _lift(tape, w)
        bv = None if b is None else _lift(tape, b)
        return _activate(affine(xv, wv, bv), act)
    x, w = _f64(x), _f64(w)
    b = None if b is None else _f64(b)
    _affine_shapes(x.shape, w.shape, None if b is None else b.shape)
    y = x @ w.T if x.ndim == 2 else w @ x
    if b is not None:
        y = y + b
    if act == "relu":
        y = np.maximum(y, 0.0)
    elif act == "tanh":
        y = np.tanh(y)
    return check_finite(y, "forward_fc output")


def softmax(a) -> np.ndarray:
    """Numerically stable softmax of a vector (max-subtraction)."""
    a = _f64(a)
    if a.ndim != 1 or a.size == 0:
        raise ValueError(f"softmax expects a nonempty vector, got shape {a.shape}")
    e = np.exp(a - a.max())
    return e / e.sum()


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a matrix."""
    a = _f64(a)
    if a.ndim != 2 or a.shape[1] == 0:
        raise ValueError(f"softmax_rows expects a matrix with columns, got shape {a.shape}")
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_var(x: Var) -> Var:
    """Stable softmax of a 1-D var, recorded on the tape."""
    if x.value.ndim != 1 or x.value.size == 0:
        raise ValueError(f"softmax expects a nonempty vector, got shape {x.value.shape}")
    e = np.exp(x.value - x.value.max())
    y = e / e.sum()
    out = x.tape._push(y, "softmax", x.requires_grad, None)
    if x.requires_grad:
        out._backward = lambda g: _acc(x, y * (g - np.dot(g, y)))
    return out


def cross_entropy_with_logits(logits: Var, labels: np.ndarray) -> Var:
    """Mean negative log-likelihood of integer labels under row-wise softmax."""
    if logits.value.ndim != 2:
        raise DimensionMismatch("cross_entropy expects [n, classes] logits")
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.value.shape[0]
    if labels.shape != (n,):
        raise DimensionMismatch(f"labels shape {labels.shape} != ({n},)")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = (lse - z[np.arange(n), labels]).mean()
    out = logits.tape._push(np.asarray(nll), "cross_entropy", logits.requires_grad, None)
    if logits.requires_grad:

        def backward(g):
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            _acc(logits, (float(g) / n) * p)

        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class MomentumState:
    """Classical (Polyak) momentum: v <- mu*v - eta*g; w <- w + v."""

    mu: float = 0.5
    eta: float = 1e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.mu < 1.0:
            raise ValueError(f"momentum coefficient must be in [0, 1), got {self.mu}")
        if not self.eta > 0.0:
            raise ValueError(f"learning rate must be positive, got {self.eta}")


def sgd_momentum_step(params: dict, grads: dict, state: MomentumState):
    """One momentum update, in place on the parameter arrays.

    Raises NonFiniteError naming the offending tensor if its gradient is not
    finite, and DimensionMismatch if a gradient shape disagrees.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionMismatch(
                f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'"
            )
        # sum is NaN/Inf iff g contains a non-finite entry (or overflows, which
        # is just as unusable); one pass instead of isfinite().all()
        if not np.isfinite(np.sum(g)):
            raise NonFiniteError(f"non-finite gradient for '{name}'")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
            state.velocity[name] = v
        np.multiply(v, state.mu, out=v)
        v -= state.eta * g
        p += v
    return params, state
