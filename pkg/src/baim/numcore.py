"""Dense tensor arithmetic with define-by-run reverse-mode gradients.

Every op returns a new immutable :class:`Tensor` that remembers its parents
and a closure mapping the output gradient to the parents' gradients.  The tape
is rebuilt on every forward pass, so graph topology may change freely between
steps (pruning, learner addition, extraction).

Randomness comes from :class:`RngStream`, a thin wrapper over the Philox4x64
counter-based generator.  Streams are addressed by ``(seed, path)`` where the
path is a tuple of integer salts, so the draws for a given purpose never depend
on how many other draws happened before.
"""

from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    DomainError,
    NonDeterminismError,
    NumericError,
    StaleTapeError,
)

_PRECISIONS = {"fp32": np.float32, "fp64": np.float64}
_dtype = np.float32
_grad_enabled = True


def set_precision(name: str) -> None:
    global _dtype
    try:
        _dtype = _PRECISIONS[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}") from None


def get_precision() -> str:
    return "fp64" if _dtype is np.float64 else "fp32"


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad():
    """Forward passes inside this block record no tape."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


# ---------------------------------------------------------------------------
# randomness


def _salt(value) -> int:
    if isinstance(value, str):
        return zlib.crc32(value.encode("utf-8"))
    value = int(value)
    if value < 0:
        raise ValueError("stream salts must be non-negative")
    return value


class RngStream:
    """Counter-based random stream (Philox4x64-10 keyed by ``seed`` and a salt path).

    ``child(*salts)`` derives an independent stream; the key is produced by
    :class:`numpy.random.SeedSequence` from ``seed`` and the salt path, which
    is specified to be platform independent.
    """

    def __init__(self, seed: int, counter: int = 0, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        key = np.random.SeedSequence(self.seed, spawn_key=self.path).generate_state(2, np.uint64)
        self._bitgen = np.random.Philox(key=key, counter=int(counter))
        self._gen = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        return int(self._bitgen.state["state"]["counter"][0])

    def child(self, *salts) -> "RngStream":
        return RngStream(self.seed, 0, self.path + tuple(_salt(s) for s in salts))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(_dtype)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape).astype(_dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def random(self, shape=None):
        return self._gen.random(size=shape)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path}, counter={self.counter})"


# ---------------------------------------------------------------------------
# tensors and parameters


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {what}")


class Tensor:
    __slots__ = ("data", "parents", "grad_fn", "param", "requires_grad", "consumed")

    def __init__(self, data, parents: tuple = (), grad_fn=None, param=None, requires_grad=False):
        self.data = data
        self.parents = parents
        self.grad_fn = grad_fn
        self.param = param
        self.requires_grad = requires_grad
        self.consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    arr = np.asarray(data, dtype=_dtype)
    _check_finite(arr, "constant")
    return Tensor(arr)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


@dataclass(eq=False)
class Parameter:
    id: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        _check_finite(self.value, f"parameter {self.id}")
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def leaf(self) -> Tensor:
        return Tensor(self.value, param=self, requires_grad=self.trainable and _grad_enabled)

    def zero_grad(self) -> None:
        if self.grad.shape == self.value.shape and self.grad.dtype == self.value.dtype:
            self.grad.fill(0)
        else:
            self.grad = np.zeros_like(self.value)

    def copy(self) -> "Parameter":
        return Parameter(self.id, self.value.copy(), self.trainable)


def _op(data: np.ndarray, parents: tuple, grad_fn, what: str) -> Tensor:
    _check_finite(data, what)
    req = any(p.requires_grad for p in parents)
    return Tensor(data, parents if req else (), grad_fn if req else None, requires_grad=req)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``Parameter.grad`` for trainable leaves."""
    if loss.data.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.consumed:
        raise StaleTapeError("backward() already ran on this tape; rebuild it with a new forward pass")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        node.consumed = True
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.param is not None:
            if node.param.trainable:
                node.param.grad += g
            continue
        if node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# ops


def apply_linear(W: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """``W @ x + b`` for a vector ``x`` or row-wise for a batch ``x`` of shape (B, n)."""
    W, b, x = as_tensor(W), as_tensor(b), as_tensor(x)
    for t, name in ((W, "W"), (b, "b"), (x, "x")):
        _check_finite(t.data, f"apply_linear input {name}")
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1] or x.ndim > 2:
        raise DimensionError(f"apply_linear: W{W.shape}, b{b.shape}, x{x.shape} do not conform")
    out = x.data @ W.data.T + b.data
    xd, Wd = x.data, W.data

    def grad_fn(g):
        if xd.ndim == 1:
            return np.outer(g, xd), g, g @ Wd
        return g.T @ xd, g.sum(axis=0), g @ Wd

    return _op(out, (W, b, x), grad_fn, "apply_linear")


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return apply_linear(W, b, x)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _op(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _op(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    d = a.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
    return _op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _op(out, (a,), lambda g: (g * out,), "exp")


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape, dt = a.shape, a.data.dtype
    return _op(np.asarray(a.data.sum(), dtype=dt), (a,), lambda g: (np.broadcast_to(g, shape).astype(dt),), "sum")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(total(a), 1.0 / n)


def add_scalars(*terms: Tensor) -> Tensor:
    """Sum of 0-d tensors in argument order."""
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def multi_linear(features: Sequence[Tensor], weights: Sequence[Tensor]) -> Tensor:
    """``sum_k features[k] @ weights[k].T`` accumulated in sequence order.

    Accumulating term by term (rather than one product over concatenated blocks)
    means that appending an all-zero block leaves the result bit-identical.
    """
    if not features or len(features) != len(weights):
        raise DimensionError("multi_linear needs matching non-empty feature/weight lists")
    fd = [f.data for f in features]
    wd = [w.data for w in weights]
    out = None
    for f, w in zip(fd, wd):
        if w.ndim != 2 or f.shape[-1] != w.shape[1] or w.shape[0] != wd[0].shape[0]:
            raise DimensionError(f"multi_linear: feature {f.shape} vs weight {w.shape}")
        term = f @ w.T
        if out is None:
            out = term
        else:
            out += term

    def grad_fn(g):
        gf = [g @ w for w in wd]
        gw = [np.outer(g, f) if f.ndim == 1 else g.T @ f for f in fd]
        return tuple(gf) + tuple(gw)

    return _op(out, tuple(features) + tuple(weights), grad_fn, "multi_linear")


def reparameterize(mu: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
    """``mu + exp(0.5 * logvar) * noise``."""
    _same_shape(mu, logvar, "reparameterize")
    if noise.shape != mu.shape:
        raise DimensionError(f"reparameterize: noise {noise.shape} vs mu {mu.shape}")
    std = np.exp(0.5 * logvar.data)
    out = mu.data + std * noise
    return _op(out, (mu, logvar), lambda g: (g, g * noise * std * 0.5), "reparameterize")


BCE_CLAMP = 1e-7


def bce_sum(target, pred: Tensor) -> Tensor:
    """Binary cross-entropy summed over the last axis; predictions are clamped first."""
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise DimensionError(f"bce_sum: target {t.shape} vs prediction {pred.shape}")
    lo, hi = BCE_CLAMP, 1 - BCE_CLAMP
    p = np.clip(pred.data, lo, hi)
    inside = (pred.data > lo) & (pred.data < hi)
    out = -(t * np.log(p) + (1 - t) * np.log1p(-p)).sum(axis=-1)

    def grad_fn(g):
        g = np.asarray(g)[..., None]
        return (g * ((p - t) / (p * (1 - p))) * inside,)

    return _op(out, (pred,), grad_fn, "bce_sum")


def kl_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    _same_shape(mu, logvar, "kl_normal")
    m, lv = mu.data, logvar.data
    ev = np.exp(lv)
    out = -0.5 * (1 + lv - m * m - ev).sum(axis=-1)

    def grad_fn(g):
        g = np.asarray(g)[..., None]
        return g * m, g * 0.5 * (ev - 1)

    return _op(out, (mu, logvar), grad_fn, "kl_normal")


def mix(weights: Tensor, parts: Sequence[Tensor | None]) -> Tensor:
    """Row-wise ``sum_k weights[:, k] * parts[k]`` accumulated in column order.

    ``None`` parts are skipped; their weight column must be all zero.
    """
    wd = weights.data
    if wd.ndim != 2 or wd.shape[1] != len(parts):
        raise DimensionError(f"mix: weights {wd.shape} vs {len(parts)} parts")
    live = [(k, p) for k, p in enumerate(parts) if p is not None]
    if not live:
        raise DimensionError("mix: no parts")
    out = None
    for k, p in live:
        if p.data.ndim != 2 or p.data.shape[0] != wd.shape[0]:
            raise DimensionError(f"mix: part {k} has shape {p.data.shape}")
        term = wd[:, k : k + 1] * p.data
        out = term if out is None else out + term
    pdata = {k: p.data for k, p in live}

    def grad_fn(g):
        gw = np.zeros_like(wd)
        for k, d in pdata.items():
            gw[:, k] = (g * d).sum(axis=1)
        return (gw,) + tuple(wd[:, k : k + 1] * g for k, _ in live)

    return _op(out, (weights,) + tuple(p for _, p in live), grad_fn, "mix")


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k column indices, highest first, lowest index winning ties."""
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :k]


def topk_softmax(logits: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Dense (B, n) weights: softmax over each row's top-k logits, zero elsewhere."""
    ld = logits.data
    if ld.ndim != 2 or not 1 <= k <= ld.shape[1]:
        raise DimensionError(f"topk_softmax: k={k} for logits {ld.shape}")
    idx = topk_indices(ld, k)
    sel = np.take_along_axis(ld, idx, axis=1)
    e = np.exp(sel - sel[:, :1])
    w_sel = e / e.sum(axis=1, keepdims=True)
    dense = np.zeros_like(ld)
    np.put_along_axis(dense, idx, w_sel, axis=1)

    def grad_fn(g):
        g_sel = np.take_along_axis(g, idx, axis=1)
        d_sel = w_sel * (g_sel - (w_sel * g_sel).sum(axis=1, keepdims=True))
        out = np.zeros_like(ld)
        np.put_along_axis(out, idx, d_sel, axis=1)
        return (out,)

    return _op(dense, (logits,), grad_fn, "topk_softmax"), idx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""
    ld = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if ld.ndim != 2 or labels.shape != (ld.shape[0],):
        raise DimensionError(f"cross_entropy: logits {ld.shape} vs labels {labels.shape}")
    z = ld - ld.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = ld.shape[0]
    out = np.asarray(-logp[np.arange(n), labels].mean(), dtype=ld.dtype)

    def grad_fn(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1
        return (d * (g / n),)

    return _op(out, (logits,), grad_fn, "cross_entropy")


def importance_cv2(weights: Tensor) -> Tensor:
    """Squared coefficient of variation of per-column weight mass."""
    wd = weights.data
    imp = wd.sum(axis=0)
    n = imp.size
    mu = imp.mean()
    if n < 2 or mu == 0:
        return _op(np.asarray(0.0, dtype=wd.dtype), (weights,), lambda g: (np.zeros_like(wd),), "importance_cv2")
    var = ((imp - mu) ** 2).mean()
    out = np.asarray(var / mu**2, dtype=wd.dtype)

    def grad_fn(g):
        dvar = 2 * (imp - mu) / n
        dmu = -2 * var / mu**3 / n
        dimp = dvar / mu**2 + dmu
        return (np.broadcast_to(g * dimp, wd.shape).astype(wd.dtype),)

    return _op(out, (weights,), grad_fn, "importance_cv2")


def scatter_rows(parts: Sequence[Tensor], rows: Sequence[np.ndarray], n_rows: int) -> Tensor:
    """Assemble a (n_rows, d) tensor from row blocks placed at the given indices."""
    d = parts[0].shape[1]
    out = np.zeros((n_rows, d), dtype=parts[0].data.dtype)
    for p, r in zip(parts, rows):
        out[r] = p.data
    return _op(out, tuple(parts), lambda g: tuple(g[r] for r in rows), "scatter_rows")


# ---------------------------------------------------------------------------
# verification and linear algebra


def finite_diff_grad(
    f: Callable[[], float],
    p: Parameter,
    indices: Iterable[int],
    eps: float = 1e-5,
) -> np.ndarray:
    """Central differences ``(f(p+eps) - f(p-eps)) / (2 eps)`` at flat ``indices`` of ``p``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = f()
    if f() != base:
        raise NonDeterminismError(f"objective changed between identical evaluations ({base!r})")
    flat = p.value.reshape(-1)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        out.append((up - down) / (2 * eps))
    return np.asarray(out, dtype=np.float64)


SYMMETRY_TOL = 1e-8
NEGATIVE_EIG_TOL = 1e-8


def psd_sqrt(S) -> np.ndarray:
    """Symmetric square root of a symmetric positive semi-definite matrix."""
    S = np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"psd_sqrt needs a square matrix, got {S.shape}")
    if not np.all(np.isfinite(S)):
        raise NumericError("psd_sqrt input is not finite")
    scale_ = max(1.0, float(np.abs(S).max(initial=0.0)))
    asym = float(np.abs(S - S.T).max(initial=0.0))
    if asym > SYMMETRY_TOL * scale_:
        raise DomainError(f"psd_sqrt input is not symmetric (max asymmetry {asym:.3g})")
    vals, vecs = np.linalg.eigh((S + S.T) / 2)
    if vals.size and vals.min() < -NEGATIVE_EIG_TOL * scale_:
        raise DomainError(f"psd_sqrt input is indefinite (min eigenvalue {vals.min():.3g})")
    root = (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T
    return (root + root.T) / 2
