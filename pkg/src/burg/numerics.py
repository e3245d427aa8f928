"""Small float64 reverse-mode autodiff core, Adam, and a finite-difference checker.

Everything in the package is built on :class:`Tensor`. Arrays are numpy
``float64`` buffers; the graph is recorded eagerly and walked in reverse
topological order by :meth:`Tensor.backward`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DTYPE = np.float64
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording the graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that records the ops applied to it.

    Leaves created with ``requires_grad=True`` get a zero-initialised
    ``grad`` buffer which :meth:`backward` accumulates into.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _node(cls, data, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- elementwise arithmetic -----------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        _check_broadcast(self, other, "add")
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._node(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        _check_broadcast(self, other, "sub")
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._node(self.data - other.data, (self, other), backward)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        _check_broadcast(self, other, "mul")
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._node(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        _check_broadcast(self, other, "div")
        a, b = self.data, other.data
        out = a / b

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)

        return Tensor._node(out, (self, other), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._node(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float) -> "Tensor":
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self.data

        def backward(g):
            return (g * p * a ** (p - 1),)

        return Tensor._node(a ** p, (self,), backward)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- unary maps -------------------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        if not np.all(np.isfinite(out)):
            raise DomainError("exp overflowed to a non-finite value")
        return Tensor._node(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        if np.any(a <= 0):
            raise DomainError("log of a non-positive value")
        return Tensor._node(np.log(a), (self,), lambda g: (g / a,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._node(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self) -> "Tensor":
        pos = self.data > 0
        return Tensor._node(np.where(pos, self.data, 0.0), (self,), lambda g: (g * pos,))

    def sqrt(self) -> "Tensor":
        a = self.data
        if np.any(a < 0):
            raise DomainError("sqrt of a negative value")
        out = np.sqrt(a)
        return Tensor._node(out, (self,), lambda g: (g * 0.5 / out,))

    def clip_min(self, lo: float) -> "Tensor":
        keep = self.data >= lo
        return Tensor._node(np.maximum(self.data, lo), (self,), lambda g: (g * keep,))

    # -- reductions -------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._node(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def sq_norm(self, axis=None, keepdims: bool = False) -> "Tensor":
        """Sum of squares; over all entries when ``axis`` is None."""
        a = self.data
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape) * 2.0 * a,)

        return Tensor._node(np.asarray((a * a).sum(axis=axis, keepdims=keepdims)), (self,), backward)

    def softmax(self) -> "Tensor":
        """Softmax over the last axis."""
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

        return Tensor._node(out, (self,), backward)

    # -- shape manipulation -----------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._node(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    @property
    def T(self) -> "Tensor":
        return Tensor._node(self.data.T, (self,), lambda g: (g.T,))

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in parts)

        def backward(g):
            full = np.zeros(shape, dtype=DTYPE)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._node(np.array(self.data[idx]), (self,), backward)

    def split(self, sizes: Sequence[int], axis: int = -1) -> list["Tensor"]:
        total = self.shape[axis]
        if sum(sizes) != total:
            raise ShapeError(f"split sizes {tuple(sizes)} do not cover axis of length {total}")
        out, start = [], 0
        for n in sizes:
            sl = [slice(None)] * self.ndim
            sl[axis] = slice(start, start + n)
            out.append(self[tuple(sl)])
            start += n
        return out

    # -- autodiff -----------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad = node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if not p.requires_grad or pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return Tensor._node(A @ B, (a, b), backward)


def scatter_rows(src: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Zero matrix with ``n_rows`` rows whose ``rows`` are filled from ``src``."""
    src = as_tensor(src)
    rows = np.asarray(rows, dtype=np.intp)
    if src.ndim != 2 or len(rows) != src.shape[0]:
        raise ShapeError(f"scatter_rows: {len(rows)} row indices for source of shape {src.shape}")
    out = np.zeros((n_rows, src.shape[1]), dtype=DTYPE)
    out[rows] = src.data
    return Tensor._node(out, (src,), lambda g: (g[rows],))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} do not align") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._node(data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._node(data, tensors, backward)


# -----------------------------------------------------------------------------
# random numbers


class Rng:
    """Seeded generator; identical seeds give identical streams."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size) * scale

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, p=None) -> int:
        return int(self._gen.choice(n, p=p))

    def spawn(self, key: int) -> "Rng":
        """Independent child stream, fully determined by (seed, key)."""
        seq = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(seq.generate_state(1, dtype=np.uint64)[0]))

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._gen.bit_generator.state = state["bit_generator"]


def init_linear(rng: Rng, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(np.zeros((1, fan_out)), requires_grad=True)
    return w, b


# -----------------------------------------------------------------------------
# optimisation


class Adam:
    """Bias-corrected Adam over a fixed list of leaf tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, names: Sequence[str] | None = None):
        self.params = list(params)
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.names = list(names) if names is not None else [f"param[{i}]" for i in range(len(self.params))]
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        for name, p in zip(self.names, self.params):
            if p.grad is None or not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {name}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(self.names, self.m, self.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for i, name in enumerate(self.names):
            self.m[i][...] = arrays[f"adam.m.{name}"]
            self.v[i][...] = arrays[f"adam.v.{name}"]
        self.step_count = int(step_count)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current contents of ``params``;
    the error per coordinate is ``|analytic - fd| / max(1, |fd|)``.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.item()):
        raise NumericError("loss is not finite at the base point")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = f().item()
            flat[k] = orig - h
            down = f().item()
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"loss is not finite at probe {k} of {p.name or 'param'}")
            fd = (up - down) / (2.0 * h)
            err = abs(analytic.reshape(-1)[k] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
