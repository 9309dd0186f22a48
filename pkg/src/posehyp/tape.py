"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every primitive builds a :class:`Tensor` whose value is computed eagerly and
which remembers how to push an upstream gradient back to its parents.
:func:`backward` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int]


class TapeError(ValueError):
    """Raised for shape errors, non-finite values and misuse of the tape."""


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("value", "parents", "op", "grad", "name", "requires_grad", "_backward")
    # make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, value, parents: Tuple["Tensor", ...] = (), op: str = "leaf",
                 backward: Optional[Callable[[np.ndarray], Tuple[np.ndarray, ...]]] = None,
                 name: Optional[str] = None, requires_grad: Optional[bool] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.op = op
        self.grad: Optional[np.ndarray] = None
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor({self.op}{label}, shape={self.shape})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, p): return pow_scalar(self, p)
    def __getitem__(self, index): return slice_(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def leaf(value, name: Optional[str] = None) -> Tensor:
    """A differentiable input (parameter or variable)."""
    return Tensor(value, name=name, requires_grad=True)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def value_of(x: ArrayLike) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(op: str, fn: Callable[[], np.ndarray], parents: Sequence[Tensor], backward) -> Tensor:
    try:
        with np.errstate(all="ignore"):
            out = fn()
    except ValueError as exc:
        shapes = ", ".join(str(p.shape) for p in parents)
        raise TapeError(f"{op}: incompatible shapes ({shapes}): {exc}") from None
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        names = ", ".join(p.name or p.op for p in parents)
        raise TapeError(f"{op}: non-finite result (inputs: {names})")
    t = Tensor(out, tuple(parents), op)
    if t.requires_grad:
        t._backward = backward
    return t


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- primitives

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", lambda: a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", lambda: a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", lambda: a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g / b.value
        return (_unbroadcast(ga, a.shape), _unbroadcast(-ga * a.value / b.value, b.shape))

    return _make("div", lambda: a.value / b.value, (a, b), backward)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product with numpy ``@`` semantics (batched, 1-D promotion)."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        av, bv = a.value, b.value
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if av.ndim == 1:
            ga = _unbroadcast(ga, (1, av.shape[0])).reshape(av.shape)
        else:
            ga = _unbroadcast(ga, av.shape)
        if bv.ndim == 1:
            gb = _unbroadcast(gb, (bv.shape[0], 1)).reshape(bv.shape)
        else:
            gb = _unbroadcast(gb, bv.shape)
        return ga, gb

    return _make("matmul", lambda: a.value @ b.value, (a, b), backward)


def leaky_relu(x: ArrayLike, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.value > 0
    return _make("leaky_relu", lambda: np.where(pos, x.value, slope * x.value), (x,),
                 lambda g: (np.where(pos, g, slope * g),))


def abs_(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    # np.sign(0) == 0 gives the zero subgradient at the kink
    return _make("abs", lambda: np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),))


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return _make("sum", lambda: np.sum(x.value, axis=axis, keepdims=keepdims), (x,),
                 lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),))


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.value, axis=axis, keepdims=keepdims)
    count = x.value.size / max(np.size(out), 1)
    return _make("mean", lambda: out, (x,),
                 lambda g: (_expand_reduced(g, x.shape, axis, keepdims) / count,))


def square(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _make("square", lambda: x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.value)
    return _make("sqrt", lambda: out, (x,), lambda g: (g / (2.0 * out),))


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _make("log", lambda: np.log(x.value), (x,), lambda g: (g / x.value,))


def pow_scalar(x: ArrayLike, exponent: float) -> Tensor:
    x = as_tensor(x)
    p = float(exponent)
    return _make("pow_scalar", lambda: np.power(x.value, p), (x,),
                 lambda g: (g * p * np.power(x.value, p - 1.0),))


def concat(items: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in items]
    if not ts:
        raise TapeError("concat: nothing to concatenate")
    ax = axis % ts[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return _make("concat", lambda: np.concatenate([t.value for t in ts], axis=ax), ts, backward)


def slice_(x: ArrayLike, index) -> Tensor:
    """Basic or advanced numpy indexing; repeated indices accumulate."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.value)
        np.add.at(full, index, g)
        return (full,)

    return _make("slice", lambda: x.value[index], (x,), backward)


def min_with_constant(x: ArrayLike, c: float) -> Tensor:
    x = as_tensor(x)
    below = x.value < c
    return _make("min_with_constant", lambda: np.minimum(x.value, c), (x,),
                 lambda g: (np.where(below, g, 0.0),))


def l2_norm(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at the origin is taken as zero."""
    x = as_tensor(x)
    out = np.sqrt(np.sum(x.value * x.value, axis=axis, keepdims=keepdims))

    def backward(g):
        n = _expand_reduced(out, x.shape, axis, keepdims)
        gg = _expand_reduced(g, x.shape, axis, keepdims)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, gg * x.value / safe, 0.0),)

    return _make("l2_norm", lambda: out, (x,), backward)


def l1_norm(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return _make("l1_norm", lambda: np.sum(np.abs(x.value), axis=axis, keepdims=keepdims), (x,),
                 lambda g: (_expand_reduced(g, x.shape, axis, keepdims) * np.sign(x.value),))


def reshape(x: ArrayLike, shape) -> Tensor:
    x = as_tensor(x)
    return _make("reshape", lambda: x.value.reshape(shape), (x,),
                 lambda g: (g.reshape(x.shape),))


def transpose(x: ArrayLike, axes: Optional[Tuple[int, int]] = None) -> Tensor:
    """Swap two axes (the last two by default)."""
    x = as_tensor(x)
    a, b = axes if axes is not None else (-1, -2)
    return _make("transpose", lambda: np.swapaxes(x.value, a, b), (x,),
                 lambda g: (np.swapaxes(g, a, b),))


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "leaky_relu": leaky_relu, "abs": abs_, "sum": sum_, "mean": mean,
    "square": square, "sqrt": sqrt, "log": log, "pow_scalar": pow_scalar,
    "concat": concat, "slice": slice_, "min_with_constant": min_with_constant,
    "l2_norm": l2_norm, "l1_norm": l1_norm, "reshape": reshape, "transpose": transpose,
}


# ------------------------------------------------------------------ backward

def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> Dict[str, np.ndarray]:
    """Populate ``.grad`` on every node upstream of a scalar ``root``.

    Returns a map from leaf name to gradient for named leaves.
    """
    if root.value.size != 1:
        raise TapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    grads: Dict[str, np.ndarray] = {}
    for node in reversed(order):
        if node.grad is None:
            continue
        if node._backward is None:
            if node.name is not None:
                grads[node.name] = node.grad
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != parent.shape:
                g = np.broadcast_to(g, parent.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
    return grads


def forward(fn: Callable[..., Tensor], bindings: Mapping[str, np.ndarray]) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Bind named arrays as leaves and evaluate ``fn(**leaves)``."""
    leaves = {k: leaf(v, name=k) for k, v in bindings.items()}
    return fn(**leaves), leaves


def value_and_grad(fn: Callable[..., Tensor], bindings: Mapping[str, np.ndarray]) -> Tuple[float, Dict[str, np.ndarray]]:
    out, leaves = forward(fn, bindings)
    grads = backward(out)
    return float(out.value), {k: grads.get(k, np.zeros_like(leaves[k].value)) for k in leaves}


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               coords: Optional[Iterable[int]] = None) -> float:
    """Max relative error between the tape gradient and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` restricts the check to a subset of flat indices.
    """
    point = np.array(point, dtype=np.float64)
    x = leaf(point)
    out = fn(x)
    if not np.all(np.isfinite(out.value)):
        raise TapeError("grad_check: non-finite function value")
    backward(out)
    analytic = np.zeros_like(point) if x.grad is None else x.grad
    flat = point.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        hi, lo = flat.copy(), flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = float(fn(constant(hi.reshape(point.shape))).value)
        f_lo = float(fn(constant(lo.reshape(point.shape))).value)
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise TapeError("grad_check: non-finite function value")
        numeric = (f_hi - f_lo) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
