"""Minimal differentiable-computation substrate on numpy.

A small fixed set of forward ops, each carrying its own analytic backward,
recorded on a per-evaluation graph. Reverse accumulation walks the recorded
graph in topological order. There is no broadcasting beyond what the listed
ops document, no GPU path, and no dynamic shapes inside an op.

Numeric clamps: probabilities to [1e-7, 1-1e-7], KL denominators to >= 1e-9,
norms to >= 1e-12. Every op checks its output for NaN/Inf and raises
NonFiniteError immediately, so a bad batch fails loudly at the op that
produced it.
"""

from __future__ import annotations

import numpy as np

PROB_EPS = 1e-7
KL_EPS = 1e-9
NORM_EPS = 1e-12


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf on finite inputs."""


class Tensor:
    """A numpy array with a gradient slot and a backward closure."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, parents=(), backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("tensor holds non-finite values")
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def _accumulate(self, g):
        if self.grad is None:
            # copy: g may be a view of another tensor's buffer
            self.grad = np.array(np.broadcast_to(g, self.values.shape))
        else:
            self.grad += g

    def backward(self):
        """Reverse accumulation from this (scalar) tensor."""
        if self.values.ndim != 0 and self.values.size != 1:
            raise ValueError("backward() requires a scalar output")
        order, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        self._accumulate(np.ones_like(self.values))
        for t in reversed(order):
            if t._backward is not None and t.requires_grad:
                t._backward(t.grad)

    # Operator sugar for the handful of places it reads better.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(values):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("op produced non-finite values")
    return values


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_check(a.values + b.values), parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_check(a.values * b.values), parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.values, b.shape))

    out._backward = backward
    return out


def scale(a, c: float):
    a = as_tensor(a)
    out = Tensor(_check(a.values * c), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    out._backward = backward
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_check(a.values @ b.values), parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.values.T)
        if b.requires_grad:
            b._accumulate(a.values.T @ g)

    out._backward = backward
    return out


def transpose(a):
    a = as_tensor(a)
    out = Tensor(a.values.T, parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    out._backward = backward
    return out


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.values.reshape(shape), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    out._backward = backward
    return out


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis),
                 parents=tuple(tensors))
    sizes = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    out._backward = backward
    return out


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def backward(g):
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    out._backward = backward
    return out


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.values.size if axis is None else a.values.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_pool(a, axis=0):
    """Mean over one axis; the pooled axis must be non-empty."""
    a = as_tensor(a)
    if a.values.shape[axis] == 0:
        raise ValueError("mean_pool over empty axis")
    return tmean(a, axis=axis)


def gather(table, indices):
    """Row lookup table[indices]; backward scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather index out of range [0, {table.shape[0]})")
    out = Tensor(table.values[idx], parents=(table,))

    def backward(g):
        if table.requires_grad:
            acc = np.empty_like(table.values)
            if g.ndim == 2:  # bincount scatter-add, much faster than add.at
                flat = idx.reshape(-1)
                n = table.shape[0]
                for j in range(g.shape[1]):
                    acc[:, j] = np.bincount(flat, weights=g[:, j], minlength=n)
            else:
                acc[:] = 0.0
                np.add.at(acc, idx, g)
            table._accumulate(acc)

    out._backward = backward
    return out


def stop_gradient(a):
    """Pass values forward, block gradients."""
    a = as_tensor(a)
    return Tensor(a.values.copy())


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.values, 0.0), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.values > 0.0))

    out._backward = backward
    return out


def sigmoid(a):
    a = as_tensor(a)
    y = np.where(a.values >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(a.values))),
                 np.exp(-np.abs(a.values)) / (1.0 + np.exp(-np.abs(a.values))))
    out = Tensor(_check(y), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * y * (1.0 - y))

    out._backward = backward
    return out


def tlog(a):
    a = as_tensor(a)
    out = Tensor(_check(np.log(a.values)), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.values)

    out._backward = backward
    return out


def texp(a):
    a = as_tensor(a)
    y = np.exp(a.values)
    out = Tensor(_check(y), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * y)

    out._backward = backward
    return out


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(_check(y), parents=(a,))

    def backward(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))

    out._backward = backward
    return out


def linear(x, W, b):
    """x @ W + b; x is [B, in], W is [in, out], b is [out]."""
    return add(matmul(x, W), b)


def l2_normalize(a, axis=-1):
    """Rows scaled to unit L2 norm; norms clamped to >= NORM_EPS."""
    a = as_tensor(a)
    n = np.sqrt((a.values ** 2).sum(axis=axis, keepdims=True))
    n = np.maximum(n, NORM_EPS)
    y = a.values / n
    out = Tensor(_check(y), parents=(a,))

    def backward(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate((g - y * dot) / n)

    out._backward = backward
    return out


def cosine_similarity(a, b, axis=-1):
    """Rowwise cosine of two same-shaped tensors."""
    return tsum(mul(l2_normalize(a, axis), l2_normalize(b, axis)),
                axis=axis)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_loss(y_hat, y):
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1-1e-7].

    Gradient is zero in the clamped region (clip semantics).
    """
    y_hat = as_tensor(y_hat)
    labels = np.asarray(y, dtype=np.float64).reshape(y_hat.shape)
    if y_hat.values.size == 0:
        raise ValueError("bce_loss on empty batch")
    p = np.clip(y_hat.values, PROB_EPS, 1.0 - PROB_EPS)
    n = p.size
    val = -(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)).mean()
    out = Tensor(_check(val), parents=(y_hat,))

    def backward(g):
        if y_hat.requires_grad:
            inside = (y_hat.values > PROB_EPS) & (y_hat.values < 1.0 - PROB_EPS)
            dp = (p - labels) / (p * (1.0 - p)) / n
            y_hat._accumulate(g * dp * inside)

    out._backward = backward
    return out


def kl_divergence(p, q, axis=-1):
    """KL(p || q) along `axis` for softmax-normalized inputs.

    q is clamped to >= 1e-9 in the denominator; the clamped entries get
    zero gradient (clip semantics). Returns per-row values when the inputs
    are batched.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence shape mismatch {p.shape} vs {q.shape}")
    qc = np.maximum(q.values, KL_EPS)
    pv = p.values
    ratio = np.where(pv > 0, np.log(np.maximum(pv, KL_EPS) / qc), 0.0)
    val = (pv * ratio).sum(axis=axis)
    out = Tensor(_check(val), parents=(p, q))

    def backward(g):
        ge = np.expand_dims(g, axis)
        if p.requires_grad:
            p._accumulate(ge * (ratio + 1.0) * (pv > 0))
        if q.requires_grad:
            q._accumulate(ge * (-pv / qc) * (q.values >= KL_EPS))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# parameters + optimizer
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named trainable tensors with per-parameter Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, values) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(values, requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.values)
        self._v[name] = np.zeros_like(t.values)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def adam_step(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        """Standard Adam with bias correction; zeroes grads afterwards."""
        b1, b2 = betas
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        self.zero_grads()

    # -- persistence -------------------------------------------------------
    def save(self, basepath: str, meta: dict | None = None):
        from . import io
        arrays = {}
        for name, p in self.params.items():
            arrays[f"param/{name}"] = p.values
            arrays[f"adam_m/{name}"] = self._m[name]
            arrays[f"adam_v/{name}"] = self._v[name]
        io.save_arrays(basepath, arrays, {"kind": "checkpoint", "t": self.t,
                                          **(meta or {})})

    @classmethod
    def load(cls, basepath: str) -> tuple["ParameterStore", dict]:
        from . import io
        arrays, meta = io.load_arrays(basepath)
        store = cls()
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            if kind == "param":
                store.add(name, arr)
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            if kind == "adam_m":
                store._m[name] = arr
            elif kind == "adam_v":
                store._v[name] = arr
        store.t = int(meta["t"])
        return store, meta


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params: dict[str, Tensor], h: float = 1e-5,
               max_coords: int = 64, seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    loss_fn must be pure and return a scalar Tensor built from `params`.
    For tensors larger than max_coords, a seeded sample of coordinates is
    checked (at least 64 per tensor). Returns the max relative error.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.values):
        raise NonFiniteError("grad_check: non-finite loss")
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None
                       else np.zeros_like(p.values))
                for name, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.values.reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= max_coords
                  else rng.choice(n, size=max_coords, replace=False))
        ga = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn().values)
            flat[i] = orig - h
            lm = float(loss_fn().values)
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            denom = max(abs(num), abs(ga[i]), 1e-6)
            worst = max(worst, abs(num - ga[i]) / denom)
    return worst
