"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (if any) only when
one of their inputs requires a gradient.  Outside a tape every operation is a
thin wrapper over numpy, which keeps inference cheap.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "Module",
    "Parameter",
    "Tape",
    "Tensor",
    "activation",
    "backward",
    "concat",
    "conv1d",
    "cross_entropy",
    "layer_norm",
    "log_softmax_last",
    "matmul",
    "no_tape",
    "softmax_last",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """An option or hyper-parameter has an invalid value."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "lcmf_active_tape", default=None
)

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Nodes are appended in execution order, which is already a topological
    order, so the backward pass is a single reverse sweep.
    """

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], GradFn]] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: GradFn) -> None:
        out._node = self
        self._nodes.append((out, parents, fn))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
        if loss._node is None:
            _accumulate(loss, seed)
            return
        pending: dict[int, np.ndarray] = {id(loss): seed}
        for out, parents, fn in reversed(self._nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    _accumulate(parent, pg)
                else:
                    key = id(parent)
                    prev = pending.get(key)
                    pending[key] = pg if prev is None else prev + pg

    def clear(self) -> None:
        self._nodes.clear()


def _accumulate(leaf: "Tensor", g: np.ndarray) -> None:
    if g.shape != leaf.data.shape:
        g = np.broadcast_to(g, leaf.data.shape)
    leaf.grad = np.array(g, dtype=np.float64) if leaf.grad is None else leaf.grad + g


class no_tape:
    """Context manager suspending gradient recording."""

    def __enter__(self) -> None:
        self._token = _ACTIVE_TAPE.set(None)

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)


def backward(loss: "Tensor") -> None:
    """Populate ``.grad`` of every tensor upstream of ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` in between
    if that is not wanted.
    """
    tape = loss._node if loss._node is not None else _ACTIVE_TAPE.get()
    if tape is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        raise ContractError("loss was not produced under an active tape")
    tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _as_tensor(value) -> "Tensor":
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple["Tensor", ...], fn: GradFn) -> "Tensor":
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = False
    if any(p.requires_grad for p in parents):
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            out.requires_grad = True
            tape._record(out, parents, fn)
    return out


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Tape | None = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        sa, sb = self.shape, other.shape
        return _result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        sa, sb = self.shape, other.shape
        return _result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            c = float(other)
            return _result(self.data * c, (self,), lambda g: (g * c,))
        a, b = self.data, other.data
        return _result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            return self * (1.0 / float(other))
        a, b = self.data, other.data
        return _result(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __neg__(self) -> "Tensor":
        return _result(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # reductions and shape -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def grad(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _result(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), grad)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return _result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape
        basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                    for i in (index if isinstance(index, tuple) else (index,)))

        def grad(g):
            out = np.zeros(shape)
            if basic:
                out[index] = g
            else:
                np.add.at(out, index, g)
            return (out,)

        return _result(self.data[index], (self,), grad)

    def exp(self) -> "Tensor":
        return activation(self, "exp")

    def sigmoid(self) -> "Tensor":
        return activation(self, "sigmoid")


# --- functional operations -------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``; ``a`` may carry leading batch dimensions."""
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")

    def grad(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _result(A @ B, (a, b), grad)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def grad(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad)


def softmax_last(t: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (t,), grad)


def log_softmax_last(t: Tensor) -> Tensor:
    z = t.data - t.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _result(out, (t,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` (n x K)."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        return Tensor(0.0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def grad(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g / n),)

    return _result(np.asarray(loss), (logits,), grad)


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply ``gain``/``bias``."""
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    w = gain.data
    d = x.shape[-1]

    def grad(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        gx_hat = g * w
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gw, gb

    return _result(xhat * w + bias.data, (t, gain, bias), grad)


def conv1d(t: Tensor, kernel: Tensor, bias: Tensor | None = None, causal: bool = True) -> Tensor:
    """Depthwise 1-d convolution along the sequence axis of a ``T x d`` tensor.

    ``kernel`` has shape ``width x d`` and ``y[j] = sum_k kernel[k] * x[j - k]``
    in causal mode, so position ``j`` never sees later positions.  The
    non-causal mode centres the window.  Out-of-range samples are zero, so a
    kernel wider than the sequence is fine.
    """
    if t.ndim != 2 or kernel.ndim != 2 or kernel.shape[1] != t.shape[1]:
        raise DimensionError(f"conv1d: expected T x d input and width x d kernel, got {t.shape}, {kernel.shape}")
    width = kernel.shape[0]
    if width < 1:
        raise ConfigurationError("conv1d: kernel width must be >= 1")
    T, d = t.shape
    shift = 0 if causal else (width - 1) // 2
    left = width - 1 - shift
    xp = np.zeros((T + width - 1, d))
    xp[left : left + T] = t.data
    K = kernel.data
    y = np.zeros((T, d))
    # y[j] = sum_k K[k] * x[j - k + shift] = sum_k K[k] * xp[j + width - 1 - k]
    for k in range(width):
        start = width - 1 - k
        y += K[k] * xp[start : start + T]
    if bias is not None:
        y += bias.data
    parents = (t, kernel) if bias is None else (t, kernel, bias)

    def grad(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(K)
        for k in range(width):
            start = width - 1 - k
            gxp[start : start + T] += K[k] * g
            gk[k] = (g * xp[start : start + T]).sum(axis=0)
        gx = gxp[left : left + T]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=0)

    return _result(y, parents, grad)


_ACTIVATIONS = ("silu", "sigmoid", "softplus", "exp")


def activation(t: Tensor, kind: str) -> Tensor:
    """Elementwise ``silu``, ``sigmoid``, ``softplus`` or ``exp``."""
    x = t.data
    if kind == "sigmoid":
        s = expit(x)
        return _result(s, (t,), lambda g: (g * s * (1.0 - s),))
    if kind == "silu":
        s = expit(x)
        return _result(x * s, (t,), lambda g: (g * (s + x * s * (1.0 - s)),))
    if kind == "softplus":
        return _result(np.logaddexp(0.0, x), (t,), lambda g: (g * expit(x),))
    if kind == "exp":
        e = np.exp(x)
        return _result(e, (t,), lambda g: (g * e,))
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {_ACTIVATIONS}")


# --- parameters and modules -----------------------------------------------


class Parameter(Tensor):
    """A trainable leaf tensor.

    ``name`` is filled in with the dot-separated attribute path the first
    time the owning module enumerates its parameters.
    """

    __slots__ = ("name", "init_spec")

    def __init__(self, data, init_spec: str = "given") -> None:
        super().__init__(data, requires_grad=True)
        self.name = ""
        self.init_spec = init_spec


def uniform_parameter(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape), f"uniform(+-1/sqrt({fan_in}))")


def constant_parameter(value: float, shape: tuple[int, ...]) -> Parameter:
    return Parameter(np.full(shape, float(value)), f"constant({value:g})")


class Module:
    """Container whose parameters are discovered from its attributes.

    Attribute order defines parameter order, so names and checkpoint layout
    are deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                continue
            seen.add(id(p))
            if not p.name:
                p.name = name
            yield name, p

    def _walk(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value._walk(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{prefix}{key}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{key}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise ConfigurationError(
                    f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}"
                )
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != np.shape(value):
                raise DimensionError(f"{name}: checkpoint shape {np.shape(value)} != {p.shape}")
            p.data = np.array(value, dtype=np.float64)


def tensors(values: Iterable) -> list[Tensor]:
    return [_as_tensor(v) for v in values]
