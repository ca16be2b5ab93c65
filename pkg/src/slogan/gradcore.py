"""Minimal dense-tensor reverse-mode autodiff engine with an Adam optimizer.

Tensors wrap numpy arrays and record their parents plus a local derivative
rule, forming a DAG. ``backward`` on a scalar root accumulates gradients into
every ``requires_grad`` ancestor by reverse topological order. numpy (and
scipy.sparse for the constant graph operators) supply the array kernels; the
differentiation rules, optimizer, and gradient checker live here.

Broadcasting is deliberately restricted: elementwise ops need exact shape
matches, except adding a row vector bias to a matrix and scaling by a python
scalar.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Build-wide precision switch (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense n-d value participating in a reverse-mode differentiation graph."""

    __slots__ = ("values", "requires_grad", "grad", "_parents")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        # list of (parent, fn) where fn maps the output gradient to the
        # parent's gradient contribution
        self._parents = []

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        """Constant copy sharing the same array, cut out of the graph."""
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into all requires_grad ancestors."""
        if self.values.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.shape}")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.values)
                node.grad += g
            for parent, fn in node._parents:
                if not parent.requires_grad and not parent._parents:
                    continue
                contrib = fn(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            stack.append((parent, False))
    return list(reversed(order))


def _make(values, parents) -> Tensor:
    out = Tensor(values)
    live = [(p, fn) for p, fn in parents if p.requires_grad or p._parents]
    if live:
        out._parents = live
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


# ---------------------------------------------------------------------------
# elementwise and linear ops


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    """Elementwise add; also supports matrix + row-vector bias and tensor + scalar."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return _make(a.values + b, [(a, lambda g: g)])
    b = as_tensor(b)
    if a.shape == b.shape:
        return _make(a.values + b.values, [(a, lambda g: g), (b, lambda g: g)])
    if a.values.ndim == 2 and b.values.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make(a.values + b.values, [(a, lambda g: g), (b, lambda g: g.sum(axis=0))])
    raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _make(a.values - b.values, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a, b) -> Tensor:
    """Elementwise product; `b` may be a python scalar."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return _make(a.values * b, [(a, lambda g: g * b)])
    b = as_tensor(b)
    _check_same_shape(a, b, "mul")
    return _make(
        a.values * b.values,
        [(a, lambda g: g * b.values), (b, lambda g: g * a.values)],
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _make(
        a.values @ b.values,
        [(a, lambda g: g @ b.values.T), (b, lambda g: a.values.T @ g)],
    )


def sparse_matmul(operator, x) -> Tensor:
    """Multiply a constant scipy sparse matrix by a dense tensor.

    The operator carries no gradient; dX = operator^T @ dY. Used for the
    normalized graph adjacency and the readout pooling matrix, keeping the
    cost proportional to the number of stored entries.
    """
    x = as_tensor(x)
    if not sp.issparse(operator):
        raise ValueError("sparse_matmul: operator must be a scipy sparse matrix")
    if x.values.ndim != 2 or operator.shape[1] != x.shape[0]:
        raise ValueError(f"sparse_matmul: shape mismatch {operator.shape} vs {x.shape}")
    op_t = operator.T.tocsr()
    return _make(operator @ x.values, [(x, lambda g: op_t @ g)])


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), [(x, lambda g: g * mask)])


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return _make(out, [(x, lambda g: g * out)])


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.values <= 0):
        raise ValueError(
            f"log: non-positive input (min {x.values.min():.3g}); clamp probabilities to [1e-12, 1]"
        )
    return _make(np.log(x.values), [(x, lambda g: g / x.values)])


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.values.size
        return _make(np.asarray(x.values.mean()), [(x, lambda g: np.full_like(x.values, float(g) / n))])
    n = x.shape[axis]
    ax = axis

    def back(g):
        return np.repeat(np.expand_dims(g, ax), n, axis=ax) / n

    return _make(x.values.mean(axis=ax), [(x, back)])


def tsum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        return _make(np.asarray(x.values.sum()), [(x, lambda g: np.full_like(x.values, float(g)))])
    n = x.shape[axis]
    ax = axis
    return _make(x.values.sum(axis=ax), [(x, lambda g: np.repeat(np.expand_dims(g, ax), n, axis=ax))])


def concat(a, b) -> Tensor:
    """Concatenate two matrices along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"concat: shape mismatch {a.shape} vs {b.shape}")
    na = a.shape[1]
    return _make(
        np.concatenate([a.values, b.values], axis=1),
        [(a, lambda g: g[:, :na]), (b, lambda g: g[:, na:])],
    )


def slice_last(x, start: int, stop: int) -> Tensor:
    """Slice columns [start:stop) along the last axis."""
    x = as_tensor(x)
    if x.values.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise ValueError(f"slice_last: bad range [{start}:{stop}) for shape {x.shape}")

    def back(g):
        full = np.zeros_like(x.values)
        full[:, start:stop] = g
        return full

    return _make(x.values[:, start:stop], [(x, back)])


def gather_rows(x, indices) -> Tensor:
    """Select matrix rows by index, repeats allowed (shuffled marginals, swap
    pairings); backward scatter-adds."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    if x.values.ndim != 2 or indices.ndim != 1:
        raise ValueError(f"gather_rows: expected matrix and index vector, got {x.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise ValueError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def back(g):
        out = np.zeros_like(x.values)
        np.add.at(out, indices, g)
        return out

    return _make(x.values[indices], [(x, back)])


def concat_rows(a, b) -> Tensor:
    """Stack two matrices along the first axis (batch union)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"concat_rows: shape mismatch {a.shape} vs {b.shape}")
    na = a.shape[0]
    return _make(
        np.concatenate([a.values, b.values], axis=0),
        [(a, lambda g: g[:na]), (b, lambda g: g[na:])],
    )


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise ValueError(f"softmax_rows: expected matrix, got shape {x.shape}")
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return p * (g - dot)

    return _make(p, [(x, back)])


def row_sqdist(a, b) -> Tensor:
    """Per-row squared L2 distance between two equally shaped matrices."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "row_sqdist")
    diff = a.values - b.values
    out = (diff * diff).sum(axis=1)

    def back_a(g):
        return 2.0 * diff * g[:, None]

    return _make(out, [(a, back_a), (b, lambda g: -2.0 * diff * g[:, None])])


def cross_entropy_rows(logits, labels) -> Tensor:
    """Per-row negative log-softmax probability of the given class indices.

    Fused log-softmax + NLL gather; numerically stable, no explicit clamping
    needed on this path.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.values.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(f"cross_entropy_rows: shape mismatch {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("cross_entropy_rows: label out of range")
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(labels.shape[0])
    out = lse - shifted[rows, labels]
    p = np.exp(shifted - lse[:, None])

    def back(g):
        grad = p * g[:, None]
        grad[rows, labels] -= g
        return grad

    return _make(out, [(logits, back)])


def log_mean_exp(x) -> Tensor:
    """Stable log(mean(exp(x))) of a vector, built from exp/mean/log with a
    constant max shift."""
    x = as_tensor(x)
    m = float(x.values.max())
    return add(log(mean(exp(add(x, -m)))), m)


# ---------------------------------------------------------------------------
# parameters, rng, optimizer


class Rng:
    """Deterministic random source; identical seed gives identical draws.

    ``child(tag)`` derives an independent stream keyed by a string, so the
    trainer's shuffling, permutation sampling, and swap plans never interleave.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key)))

    def child(self, tag: str) -> "Rng":
        digest = hashlib.sha256(tag.encode()).digest()
        return Rng(self.seed, self._key + (int.from_bytes(digest[:4], "little"),))

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def derangement(self, n: int, tries: int = 10) -> np.ndarray:
        """Uniform permutation, retried a few times to avoid fixed points."""
        perm = self.gen.permutation(n)
        for _ in range(tries):
            if n < 2 or not np.any(perm == np.arange(n)):
                break
            perm = self.gen.permutation(n)
        return perm


def glorot(rng: Rng, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class ParamStore:
    """Named trainable parameters plus per-parameter Adam moment state.

    Each parameter carries its own update counter so bias correction stays
    consistent for parameters that sit out some steps (a training phase where
    a loss term is disabled gives its parameters no gradient and no update).
    """

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self.params[name] = tensor
        self.m[name] = np.zeros_like(tensor.values)
        self.v[name] = np.zeros_like(tensor.values)
        self.t[name] = 0
        return tensor

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self.params.items():
            out.add(name, Tensor(p.values.copy(), requires_grad=True))
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
            out.t[name] = self.t[name]
        out.step_count = self.step_count
        return out


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _adam_update(store: ParamStore, name: str, lr: float) -> None:
    p = store.params[name]
    g = p.grad
    store.t[name] += 1
    t = store.t[name]
    store.m[name] = ADAM_BETA1 * store.m[name] + (1.0 - ADAM_BETA1) * g
    store.v[name] = ADAM_BETA2 * store.v[name] + (1.0 - ADAM_BETA2) * (g * g)
    m_hat = store.m[name] / (1.0 - ADAM_BETA1 ** t)
    v_hat = store.v[name] / (1.0 - ADAM_BETA2 ** t)
    p.values -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def adam_step(store: ParamStore, lr: float) -> None:
    """One bias-corrected Adam update over every parameter; grads are zeroed after."""
    for name, p in store.params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    store.step_count += 1
    for name in store.params:
        _adam_update(store, name, lr)
    store.zero_grad()


def adam_step_active(store: ParamStore, lr: float) -> None:
    """Adam update over the parameters that received gradients this step;
    the rest stay frozen with their moments untouched."""
    store.step_count += 1
    for name, p in store.params.items():
        if p.grad is not None:
            _adam_update(store, name, lr)
    store.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, x: Tensor, tol: float, step: float = 1e-5,
                      max_entries: int | None = None, rng: Rng | None = None) -> dict:
    """Compare analytic gradients of scalar f(x) against central differences.

    Checks every entry of x unless ``max_entries`` caps the count (entries are
    then sampled with ``rng``). Returns max relative error and pass/fail.
    """
    base = f(x)
    if not np.all(np.isfinite(base.values)):
        raise ValueError("finite_diff_check: f(x) is not finite")
    if base.values.size != 1:
        raise ValueError("finite_diff_check: f must be scalar-valued")

    was_requiring = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.values) if x.grad is None else x.grad.copy()
    x.zero_grad()
    x.requires_grad = was_requiring

    flat = x.values.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        if rng is None:
            rng = Rng(0)
        idx = rng.gen.choice(flat.size, size=max_entries, replace=False)

    max_rel = 0.0
    an_flat = analytic.reshape(-1)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(x).values)
        flat[i] = orig - step
        lo = float(f(x).values)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * step)
        denom = max(abs(an_flat[i]), abs(numeric), 1e-4)
        max_rel = max(max_rel, abs(an_flat[i] - numeric) / denom)
    return {"max_rel_err": max_rel, "passed": max_rel < tol, "checked": int(len(idx))}
