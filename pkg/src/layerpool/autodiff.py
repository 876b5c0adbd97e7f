"""Reverse-mode autodiff tape, seeded randomness, and stable reductions.

Everything trains in float64. The tape is the implicit graph of `Tensor`
nodes; ``Tensor.backward`` walks it once in reverse topological order.
"""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """Splittable deterministic random stream.

    Backed by the counter-based Philox generator. A stream is identified by
    (seed, path); ``child(*tags)`` derives an independent stream by extending
    the path. The Philox key is SHA-256 of the (seed, path) repr, so equal
    seeds and paths always give identical streams and distinct paths give
    statistically independent ones.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, *tags) -> "Rng":
        return Rng(self.seed, self.path + tags)

    def generator(self) -> np.random.Generator:
        digest = hashlib.sha256(repr((self.seed, self.path)).encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


_F64 = np.dtype(np.float64)


class Tensor:
    """A float64 array node on the tape.

    Operations record a backward closure referencing their parents; calling
    ``backward()`` on a scalar result accumulates gradients into every
    reachable node with ``requires_grad``. Parameters that do not participate
    in a computation keep ``grad is None`` (exactly zero).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False, parents=(), bw=None):
        if type(data) is not np.ndarray or data.dtype != _F64:
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        if not requires_grad:
            for p in parents:
                if p.requires_grad:
                    requires_grad = True
                    break
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents if requires_grad else ()
        self._bw = bw if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bw is not None:
                node._bw(node.grad)

    # ---- arithmetic -------------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._lift(other)
        out = Tensor(self.data + other.data, parents=(self, other))

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        out._bw = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))
        out._bw = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        out = Tensor(self.data * other.data, parents=(self, other))

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        out._bw = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out = Tensor(self.data / other.data, parents=(self, other))

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(
                    _unbroadcast(-g * self.data / other.data**2, other.data.shape)
                )

        out._bw = bw
        return out

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent: float):
        out = Tensor(self.data**exponent, parents=(self,))
        out._bw = lambda g: self._accum(g * exponent * self.data ** (exponent - 1))
        return out

    def __matmul__(self, other):
        other = self._lift(other)
        out = Tensor(self.data @ other.data, parents=(self, other))

        def bw(g):
            if self.requires_grad:
                if other.data.ndim == 1:
                    self._accum(np.outer(g, other.data) if self.data.ndim == 2 else g * other.data)
                else:
                    self._accum(np.atleast_2d(g) @ other.data.T if self.data.ndim == 2 else g @ other.data.T)
            if other.requires_grad:
                if self.data.ndim == 1:
                    other._accum(np.outer(self.data, g) if other.data.ndim == 2 else g * self.data)
                else:
                    other._accum(self.data.T @ np.atleast_2d(g) if other.data.ndim == 2 else self.data.T @ g)

        out._bw = bw
        return out

    # ---- shape ------------------------------------------------------------

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], parents=(self,))

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)

        out._bw = bw
        return out

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), parents=(self,))
        out._bw = lambda g: self._accum(g.reshape(self.data.shape))
        return out

    @property
    def T(self):
        out = Tensor(self.data.T, parents=(self,))
        out._bw = lambda g: self._accum(g.T)
        return out

    @staticmethod
    def concat(tensors: list["Tensor"], axis: int = 0) -> "Tensor":
        tensors = [Tensor._lift(t) for t in tensors]
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                     parents=tuple(tensors))
        offsets = [0]
        for t in tensors:
            offsets.append(offsets[-1] + t.data.shape[axis])

        def bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t._accum(g[tuple(sl)])

        out._bw = bw
        return out

    @staticmethod
    def stack_rows(tensors: list["Tensor"]) -> "Tensor":
        """Stack 1-D tensors into a matrix, one per row."""
        tensors = [Tensor._lift(t) for t in tensors]
        rows = [t.data for t in tensors]
        stacked = np.empty((len(rows),) + rows[0].shape)
        for i, row in enumerate(rows):
            stacked[i] = row
        out = Tensor(stacked, parents=tuple(tensors))

        def bw(g):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accum(g[i])

        out._bw = bw
        return out

    # ---- reductions and elementwise ---------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy())

        out._bw = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, parents=(self,))
        out._bw = lambda g: self._accum(g * (1.0 - y * y))
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, parents=(self,))
        out._bw = lambda g: self._accum(g * y)
        return out

    def log(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            out = Tensor(np.log(self.data), parents=(self,))
        out._bw = lambda g: self._accum(g / self.data)
        return out

    def logsumexp(self, axis: int = -1, keepdims: bool = False):
        """Stable log-sum-exp along an axis, with a softmax backward."""
        m = self.data.max(axis=axis, keepdims=True)
        s = np.exp(self.data - m).sum(axis=axis, keepdims=True)
        val = m + np.log(s)
        soft = np.exp(self.data - val)
        out = Tensor(val if keepdims else np.squeeze(val, axis=axis), parents=(self,))

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(g * soft)

        out._bw = bw
        return out

    def softmax(self, axis: int = -1):
        return (self - self.logsumexp(axis=axis, keepdims=True)).exp()

    def item(self) -> float:
        return float(self.data)


# ---- scalar/array utilities (non-tape public operations) -------------------


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-shift stabilization."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_sim: zero-norm input (degenerate embedding)")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def log_sum_exp(xs) -> float:
    """max(xs) + ln sum exp(x - max); overflow-safe."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise ValueError("log_sum_exp: empty input")
    m = float(xs.max())
    return m + float(np.log(np.exp(xs - m).sum()))


def dropout_mask(shape, p: float, rng: Rng) -> np.ndarray:
    """Inverted-dropout mask of {0, 1/(1-p)}; identity when p = 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape, dtype=np.float64)
    keep = rng.generator().random(shape) >= p
    return keep.astype(np.float64) / (1.0 - p)


def grad_check(f, params: list[np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients of f and central differences.

    `f` maps a list of Tensors to a scalar Tensor. Relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    tensors = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in params]
    out = f(tensors)
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check: non-finite function value")
    out.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(tensors).data)
            flat[i] = orig - eps
            fm = float(f(tensors).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
