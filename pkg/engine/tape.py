"""Reverse-mode differentiation over dense float64 arrays.

Operations record themselves on the active :class:`Tape` when at least one
input needs a gradient. Outside a tape every operation is a plain forward
computation, which is how evaluation runs.
"""
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from common.errors import NumericError, ShapeError

# Logits are clamped to this range before stochastic relaxations.
LOGIT_CLAMP = 30.0

_local = threading.local()


class Tensor:
    """A dense array, optionally tracked for gradients."""

    __slots__ = ("values", "requires_grad", "name")

    def __init__(
        self,
        values: object,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        """Wrap values as float64."""
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        """Dimensions of the array."""
        return self.values.shape

    def item(self) -> float:
        """The value of a one-element tensor."""
        return float(self.values.reshape(-1)[0])

    def __len__(self) -> int:
        """Length of the leading axis."""
        return len(self.values)

    def __repr__(self) -> str:
        """Show the name, shape and whether gradients are tracked."""
        label = f"{self.name} " if self.name else ""
        return f"Tensor({label}shape={self.shape}, grad={self.requires_grad})"


def constant(values: object) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(values)


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of operations, replayed backwards for gradients."""

    def __init__(self):
        """Start with an empty record."""
        self.records: list[tuple[Tensor, tuple[Tensor, ...], VJP]] = []

    def __enter__(self) -> "Tape":
        """Make this the active tape of the current thread."""
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc: object):
        """Deactivate the tape."""
        _local.stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: VJP):
        """Append an operation."""
        self.records.append((out, inputs, vjp))

    def __len__(self) -> int:
        """Number of recorded operations."""
        return len(self.records)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar loss with respect to every tracked tensor."""
        if loss.values.size != 1:
            raise NumericError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        grads = {loss: np.ones_like(loss.values)}
        for out, inputs, vjp in reversed(self.records):
            g = grads.get(out)
            if g is None:
                continue
            for x, gx in zip(inputs, vjp(g)):
                if gx is None or not x.requires_grad:
                    continue
                if x in grads:
                    grads[x] = grads[x] + gx
                else:
                    grads[x] = np.array(gx, dtype=np.float64)
        return grads


def active_tape() -> Optional[Tape]:
    """The innermost tape of the current thread, if any."""
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Differentiate a loss recorded on the active tape."""
    tape = active_tape()
    if tape is None:
        raise NumericError("backward called outside of a tape")
    return tape.backward(loss)


def _result(values: np.ndarray, inputs: tuple[Tensor, ...], vjp: VJP):
    tape = active_tape()
    tracked = tape is not None and any(x.requires_grad for x in inputs)
    out = Tensor(values, requires_grad=tracked)
    if tracked:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(x: Tensor, y: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {x.shape} and {y.shape} do not match"
        ) from None


def op_linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:  # noqa: N803
    """Affine map ``x @ W + b`` for a vector or a row-stacked matrix."""
    if x.values.ndim not in (1, 2) or W.values.ndim != 2:
        raise ShapeError(f"linear: shapes {x.shape} and {W.shape} unsupported")
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(
            f"linear: shapes {x.shape} and {W.shape} (bias {b.shape}) "
            "do not match"
        )
    xv, wv = x.values, W.values

    def vjp(g: np.ndarray) -> tuple:
        gw = np.outer(xv, g) if xv.ndim == 1 else xv.T @ g
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return g @ wv.T, gw, gb

    return _result(xv @ wv + b.values, (x, W, b), vjp)


def op_relu(x: Tensor) -> Tensor:
    """Rectified linear unit."""
    mask = x.values > 0
    return _result(x.values * mask, (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def op_sigmoid(x: Tensor) -> Tensor:
    """Logistic function."""
    s = _sigmoid(x.values)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def op_log(x: Tensor) -> Tensor:
    """Natural logarithm of a positive tensor."""
    if np.any(x.values <= 0):
        raise NumericError("log of a non-positive value")
    xv = x.values
    return _result(np.log(xv), (x,), lambda g: (g / xv,))


def op_concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along an axis (the last one by default)."""
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    try:
        values = np.concatenate([x.values for x in xs], axis=axis)
    except ValueError:
        shapes = " and ".join(str(x.shape) for x in xs)
        raise ShapeError(f"concat: shapes {shapes} do not match") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g: np.ndarray) -> list:
        return np.split(g, bounds, axis=axis)

    return _result(values, tuple(xs), vjp)


def op_add(x: Tensor, y: Tensor) -> Tensor:
    """Element-wise sum with numpy broadcasting."""
    _broadcast_shape(x, y, "add")
    xs, ys = x.shape, y.shape

    def vjp(g: np.ndarray) -> tuple:
        return _unbroadcast(g, xs), _unbroadcast(g, ys)

    return _result(x.values + y.values, (x, y), vjp)


def op_sub(x: Tensor, y: Tensor) -> Tensor:
    """Element-wise difference with numpy broadcasting."""
    _broadcast_shape(x, y, "sub")
    xs, ys = x.shape, y.shape

    def vjp(g: np.ndarray) -> tuple:
        return _unbroadcast(g, xs), -_unbroadcast(g, ys)

    return _result(x.values - y.values, (x, y), vjp)


def op_mul(x: Tensor, y: Tensor) -> Tensor:
    """Element-wise product with numpy broadcasting."""
    _broadcast_shape(x, y, "mul")
    xv, yv = x.values, y.values

    def vjp(g: np.ndarray) -> tuple:
        return _unbroadcast(g * yv, xv.shape), _unbroadcast(g * xv, yv.shape)

    return _result(xv * yv, (x, y), vjp)


def op_div(x: Tensor, y: Tensor) -> Tensor:
    """Element-wise quotient with numpy broadcasting."""
    _broadcast_shape(x, y, "div")
    xv, yv = x.values, y.values

    def vjp(g: np.ndarray) -> tuple:
        return (
            _unbroadcast(g / yv, xv.shape),
            _unbroadcast(-g * xv / (yv * yv), yv.shape),
        )

    return _result(xv / yv, (x, y), vjp)


def op_scale(x: Tensor, factor: float, shift: float = 0.0) -> Tensor:
    """``factor * x + shift`` for constant scalars."""
    return _result(x.values * factor + shift, (x,), lambda g: (g * factor,))


def op_sum(xs: Sequence[Tensor]) -> Tensor:
    """Element-wise sum of equally shaped tensors."""
    if not xs:
        raise ShapeError("sum: nothing to add")
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError(
                f"sum: shapes {xs[0].shape} and {x.shape} do not match"
            )
    total = xs[0].values.copy()
    for x in xs[1:]:
        total = total + x.values
    return _result(total, tuple(xs), lambda g: [g] * len(xs))


def op_reduce_sum(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar."""
    shape = x.shape
    return _result(
        np.asarray(x.values.sum()),
        (x,),
        lambda g: (np.broadcast_to(g, shape),),
    )


def op_mean_rows(x: Tensor) -> Tensor:
    """Mean over the leading axis."""
    if x.values.ndim != 2 or not len(x):
        raise ShapeError(f"mean: need a non-empty matrix, got {x.shape}")
    n = len(x)
    shape = x.shape

    def vjp(g: np.ndarray) -> tuple:
        return (np.broadcast_to(g / n, shape),)

    return _result(x.values.sum(axis=0) / n, (x,), vjp)


def op_stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not xs:
        raise ShapeError("stack: nothing to stack")
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError(
                f"stack: shapes {xs[0].shape} and {x.shape} do not match"
            )
    values = np.stack([x.values for x in xs])
    return _result(values, tuple(xs), lambda g: list(g))


def op_reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Same values, new dimensions."""
    original = x.shape
    try:
        values = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {original} as {shape}") from None
    return _result(values, (x,), lambda g: (g.reshape(original),))


def op_max_rows(x: Tensor) -> Tensor:
    """Column-wise max of a matrix; ties go to the first row."""
    if x.values.ndim != 2 or not len(x):
        raise ShapeError(f"max pool: need a non-empty matrix, got {x.shape}")
    winners = np.argmax(x.values, axis=0)
    columns = np.arange(x.shape[1])
    shape = x.shape

    def vjp(g: np.ndarray) -> tuple:
        gx = np.zeros(shape)
        gx[winners, columns] = g
        return (gx,)

    return _result(x.values[winners, columns], (x,), vjp)


def op_max_pool(xs: Sequence[Tensor]) -> Tensor:
    """Element-wise max across a list of vectors."""
    return op_max_rows(op_stack(xs))


def op_gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows of a matrix picked by index (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def vjp(g: np.ndarray) -> tuple:
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.values[index], (x,), vjp)


def op_scale_rows(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply every row of a matrix by its own weight."""
    if x.values.ndim != 2 or weights.shape != (x.shape[0],):
        raise ShapeError(
            f"scale rows: shapes {x.shape} and {weights.shape} do not match"
        )
    xv, wv = x.values, weights.values

    def vjp(g: np.ndarray) -> tuple:
        return g * wv[:, None], (g * xv).sum(axis=1)

    return _result(xv * wv[:, None], (x, weights), vjp)


def op_matmul_const(a: np.ndarray, x: Tensor) -> Tensor:
    """Left-multiply a tensor by a constant matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[1] != x.shape[0]:
        raise ShapeError(
            f"matmul: shapes {a.shape} and {x.shape} do not match"
        )
    return _result(a @ x.values, (x,), lambda g: (a.T @ g,))


def op_cosine(x: Tensor, y: Tensor) -> Tensor:
    """Cosine similarity of two vectors; zero when either has no length."""
    if x.values.ndim != 1 or x.shape != y.shape:
        raise ShapeError(f"cosine: shapes {x.shape} and {y.shape} do not match")
    xv, yv = x.values, y.values
    nx, ny = np.linalg.norm(xv), np.linalg.norm(yv)
    if nx == 0 or ny == 0:
        return _result(
            np.asarray(0.0), (x, y), lambda g: (np.zeros_like(xv), None)
        )
    c = float(xv @ yv) / (nx * ny)

    def vjp(g: np.ndarray) -> tuple:
        gx = (yv / (nx * ny) - c * xv / (nx * nx)) * g
        gy = (xv / (nx * ny) - c * yv / (ny * ny)) * g
        return gx, gy

    return _result(np.asarray(c), (x, y), vjp)


def op_logit(p: Tensor) -> Tensor:
    """Inverse sigmoid, clamped to +-LOGIT_CLAMP."""
    pv = p.values
    with np.errstate(divide="ignore"):
        raw = np.log(pv) - np.log1p(-pv)
    values = np.clip(raw, -LOGIT_CLAMP, LOGIT_CLAMP)
    inside = np.abs(raw) < LOGIT_CLAMP

    def vjp(g: np.ndarray) -> tuple:
        slope = np.zeros_like(pv)
        slope[inside] = 1.0 / (pv[inside] * (1.0 - pv[inside]))
        return (g * slope,)

    return _result(values, (p,), vjp)


def gumbel_difference(
    rng: np.random.Generator, shape: tuple[int, ...]
) -> np.ndarray:
    """Difference of two independent standard Gumbel draws."""
    return rng.gumbel(size=shape) - rng.gumbel(size=shape)


def op_gumbel_sigmoid(
    logit: Tensor,
    temperature: float,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> Tensor:
    """Binary-concrete relaxation of a Bernoulli draw.

    Pass ``noise`` (a :func:`gumbel_difference` draw) to replay a sample.
    """
    if not temperature > 0:
        raise NumericError(f"temperature must be > 0, got {temperature}")
    if noise is None:
        if rng is None:
            raise NumericError("gumbel sigmoid needs an rng or fixed noise")
        noise = gumbel_difference(rng, logit.shape)
    s = _sigmoid((logit.values + noise) / temperature)
    return _result(s, (logit,), lambda g: (g * s * (1.0 - s) / temperature,))


def op_gaussian_reparam(
    mu: Tensor,
    sigma: Tensor,
    rng: Optional[np.random.Generator] = None,
    eps: Optional[np.ndarray] = None,
) -> Tensor:
    """Draw ``mu + sigma * eps`` with standard normal ``eps``."""
    if mu.shape != sigma.shape:
        raise ShapeError(
            f"reparam: shapes {mu.shape} and {sigma.shape} do not match"
        )
    if np.any(sigma.values <= 0):
        raise NumericError("sigma must be strictly positive")
    if eps is None:
        if rng is None:
            raise NumericError("reparameterisation needs an rng or fixed eps")
        eps = rng.standard_normal(mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    return _result(
        mu.values + sigma.values * eps, (mu, sigma), lambda g: (g, g * eps)
    )


def op_bernoulli_kl(p: Tensor, tau: float) -> Tensor:
    """Summed KL divergence of Bernoulli(p) against Bernoulli(tau).

    ``0 * log 0`` counts as zero.
    """
    if not 0 < tau < 1:
        raise NumericError(f"tau must lie in (0, 1), got {tau}")
    pv = p.values
    q = 1.0 - pv
    with np.errstate(divide="ignore", invalid="ignore"):
        head = np.where(pv > 0, pv * np.log(pv / tau), 0.0)
        tail = np.where(q > 0, q * np.log(q / (1.0 - tau)), 0.0)
    value = np.asarray((head + tail).sum())
    clipped = np.clip(pv, 1e-12, 1.0 - 1e-12)

    def vjp(g: np.ndarray) -> tuple:
        slope = np.log(clipped / tau) - np.log((1.0 - clipped) / (1.0 - tau))
        return (g * slope,)

    return _result(value, (p,), vjp)
