"""A small dense tensor engine on top of numpy with reverse-mode differentiation.

Every op returns a :class:`Tensor` that remembers its parents and a closure
computing the parents' gradient contributions.  :func:`backward` walks the
recorded graph in reverse topological order.  Kernels cover what two small
transformer stacks and a bilinear baseline need; broadcasting follows numpy.
"""

from __future__ import annotations

import contextlib
import io
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, IndexOutOfRange, NotScalar, ShapeMismatch

DEFAULT_DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn: Callable | None = None,
                 requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
    return Tensor(arr)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data, parents, fn) -> Tensor:
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, parents, fn)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_shapes(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{name}: cannot broadcast {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def _is_scalar(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    if _is_scalar(a):
        b = as_tensor(b)
        return _make(a - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data * b, (a,), lambda g: (g * b,))
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    c = np.sqrt(2.0 / np.pi)
    u = c * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def fn(g):
        du = c * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make(out, (x,), fn)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def logit(p, eps: float = 1e-6) -> Tensor:
    """Inverse sigmoid with the input clipped into [eps, 1 - eps]."""
    p = as_tensor(p)
    q = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)
    return _make(np.log(q) - np.log1p(-q), (p,), lambda g: (g * inside / (q * (1.0 - q)),))


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    x = as_tensor(x)
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape {x.shape} -> {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def take(x, idx) -> Tensor:
    """numpy indexing; the gradient scatters back with ``np.add.at``."""
    x = as_tensor(x)
    if isinstance(idx, Tensor):
        raise TypeError("index with arrays, not tensors")
    out = x.data[idx]

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (x,), fn)


def gather_rows(table, ids) -> Tensor:
    return take(table, np.asarray(ids, dtype=np.intp))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def concat_rows(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=0)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), fn)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# Contractions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), fn)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum.  Every index of an operand must also appear in the
    other operand or in the output (true of all contractions used here)."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_s = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if any(c not in other and c not in out_s for c in s) or len(set(s)) != len(s):
            raise ValueError(f"unsupported einsum spec {spec!r}")
    try:
        out = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ShapeMismatch(f"einsum {spec}: {exc}") from None

    def fn(g):
        ga = np.einsum(f"{out_s},{sb}->{sa}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_s},{sa}->{sb}", g, a.data, optimize=True)
        return ga, gb

    return _make(out, (a, b), fn)


# ---------------------------------------------------------------------------
# Normalisation and losses
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def softmax_rows(x) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis; optional affine ``gamma``/``beta``."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def fn(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True)
                       - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _make(xhat, (x,), fn)
    if gamma is not None:
        if as_tensor(gamma).shape != (n,):
            raise ShapeMismatch(f"layer_norm gamma shape {as_tensor(gamma).shape} != ({n},)")
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    y = x.data / norm
    return _make(y, (x,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,))


def cross_entropy_logits(logits, answers) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[answer]``.

    ``logits`` is ``(C,)`` with a scalar answer, or ``(N, C)`` with ``N`` answers.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    ans = np.atleast_1d(np.asarray(answers, dtype=np.intp))
    if z.ndim != 2 or ans.shape != (z.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape}, answers {ans.shape}")
    if z.shape[1] < 1 or (ans < 0).any() or (ans >= z.shape[1]).any():
        raise IndexOutOfRange("answer index out of range")
    shift = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(lse - shift[rows, ans]))

    def fn(g):
        p = np.exp(shift - lse[:, None])
        p[rows, ans] -= 1.0
        p *= g / z.shape[0]
        return (p[0] if single else p,)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), fn)


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every reachable tensor.

    Returns ``{name: gradient}`` for ``params`` (zeros for unreached ones).
    """
    if loss.data.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return {}
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


# ---------------------------------------------------------------------------
# Parameters, optimiser, checkpoints
# ---------------------------------------------------------------------------

class ParamStore(OrderedDict):
    """Named trainable tensors in registration order."""

    def add(self, name: str, value) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, copy=True), requires_grad=True, name=name)
        self[name] = t
        return t

    def zero_grad(self):
        for p in self.values():
            p.grad = None

    def grads(self) -> dict:
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.items()}

    def arrays(self) -> dict:
        return {n: p.data for n, p in self.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]):
        for name, p in self.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def num_scalars(self) -> int:
        return sum(p.data.size for p in self.values())


class Adam:
    """Adam with bias-corrected moments."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray] | None = None):
        if grads is None:
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: Adam):
    state.step(params, grads)
    return params


CHECKPOINT_MAGIC = b"KHGQA-CKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Binary checkpoint: magic, version, manifest length, JSON manifest, raw payloads.

    Payloads are little-endian float64/float32 in manifest order.
    """
    entries, payload = [], io.BytesIO()
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                        "offset": payload.tell(), "nbytes": len(raw)})
        payload.write(raw)
    manifest = json.dumps({"version": CHECKPOINT_VERSION, "params": entries,
                           "meta": dict(meta or {})}, sort_keys=True, indent=1).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(manifest)))
        fh.write(manifest)
        fh.write(payload.getvalue())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns ``(arrays, meta)``."""
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, mlen = struct.unpack_from("<II", blob, off)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    manifest = json.loads(blob[off:off + mlen].decode("utf-8"))
    base = off + mlen
    arrays = {}
    for e in manifest["params"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=e["dtype"])
        native = np.float64 if e["dtype"] == "<f8" else np.float32
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(native)
    return arrays, manifest.get("meta", {})


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                 indices: Iterable | None = None) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. ``arr`` (mutated in place and restored)."""
    out = np.zeros_like(arr)
    it = np.ndindex(arr.shape) if indices is None else indices
    with no_grad():
        for ix in it:
            old = arr[ix]
            arr[ix] = old + h
            fp = f()
            arr[ix] = old - h
            fm = f()
            arr[ix] = old
            out[ix] = (fp - fm) / (2 * h)
    return out
