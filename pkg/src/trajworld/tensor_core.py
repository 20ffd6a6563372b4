"""Minimal dense-tensor engine with reverse-mode gradients.

Covers exactly the primitives the trajectory model needs: broadcasted
arithmetic, matmul, reshape/transpose, reductions, GELU, exp/log, softmax,
layer norm, dropout and a fused scaled-dot-product attention kernel with a
hand-derived backward. Tensors are numpy-backed and immutable after
construction; gradients are recorded on an explicit ``GradTape``.
"""

from __future__ import annotations

import hashlib
import math
import struct
import threading

import numpy as np
from scipy.special import ndtr

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float64

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was found where only finite values are allowed."""


def set_default_dtype(name):
    """Switch global precision ("float64" default, "float32" for speed)."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


def counter_rng(*parts):
    """Deterministic counter-based Generator keyed by a tuple of ints.

    The parts are hashed into the two 64-bit Philox key words, so any
    number of tags (seed, step, stream, ...) yields an independent,
    platform-stable random stream.
    """
    blob = np.array(parts, dtype=np.int64).tobytes()
    digest = hashlib.blake2b(blob, digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class Tensor:
    """A dense row-major array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class GradTape:
    """Ordered record of primitive ops; backward replays it in reverse.

    One tape is single-threaded; independent tapes may run on separate
    threads (the active tape is thread-local).
    """

    def __init__(self):
        self._nodes = []  # (out, parents, backward_fn)
        self._out_ids = set()

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a GradTape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def _record(self, out, parents, backward_fn):
        self._nodes.append((out, parents, backward_fn))
        self._out_ids.add(id(out))

    def backward(self, root):
        """Accumulate gradients of a scalar ``root`` into every
        requires_grad leaf reachable on this tape. Clears the tape."""
        if root.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        if not self._nodes:
            raise RuntimeError("backward called on an empty tape")
        grads = {id(root): np.ones_like(root.data)}
        leaves = {}
        for out, parents, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if id(parent) not in self._out_ids:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
        self._nodes.clear()
        self._out_ids.clear()


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    return _make(data, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dims mismatch: {a.shape[-1]} (lhs {a.shape}) vs "
            f"{b.shape[-2]} (rhs {b.shape})")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = _as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,),
                 lambda g: (g.transpose(inv),))


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(np.asarray(data), (a,), backward)


def mean_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp_(a):
    a = _as_tensor(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log_(a):
    a = _as_tensor(a)
    data = np.log(a.data)
    return _make(data, (a,), lambda g: (g / a.data,))


def softplus(a):
    """log(1 + exp(x)), computed overflow-free."""
    a = _as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return _make(data, (a,), backward)


def gelu(a):
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    a = _as_tensor(a)
    phi = ndtr(a.data)
    data = a.data * phi

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        return (g * (phi + a.data * pdf),)

    return _make(data, (a,), backward)


def _softmax_np(x, axis):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {a.ndim}")
    y = _softmax_np(a.data, axis)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), backward)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Layer norm over the last axis with learned gain and bias."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        gy = g * gamma.data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        ga = inv * (gy - m1 - xhat * m2)
        return ga, ggamma, gbeta

    return _make(data, (a, gamma, beta), backward)


def dropout(a, rate, seed, layer_id, step):
    """Inverted dropout with a counter-based RNG stream.

    The stream is keyed by (seed, layer_id, step) so training is bitwise
    reproducible regardless of call order. rate == 0 is the identity map.
    """
    a = _as_tensor(a)
    if rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    rng = counter_rng(seed, layer_id, step)
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def attention(q, k, v, causal=False, return_weights=False):
    """Fused scaled dot-product attention over shape (..., S, dh).

    Computes softmax(q k^T / sqrt(dh)) v, with an optional strict causal
    mask over the sequence axis. Leading axes are batch (e.g. heads).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"attention shapes incompatible: q{q.shape} k{k.shape} v{v.shape}")
    dh = q.shape[-1]
    inv_scale = 1.0 / math.sqrt(dh)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * inv_scale
    if causal:
        sq, sk = scores.shape[-2], scores.shape[-1]
        mask = np.tril(np.ones((sq, sk), dtype=bool), k=sk - sq)
        scores = np.where(mask, scores, -np.inf)
    weights = _softmax_np(scores, -1)
    data = np.matmul(weights, v.data)

    def backward(g):
        gv = _unbroadcast(np.matmul(np.swapaxes(weights, -1, -2), g), v.shape)
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        dot = (gw * weights).sum(axis=-1, keepdims=True)
        gs = weights * (gw - dot)  # masked entries have weight 0 -> grad 0
        gq = _unbroadcast(np.matmul(gs, k.data) * inv_scale, q.shape)
        gk = _unbroadcast(
            np.matmul(np.swapaxes(gs, -1, -2), q.data) * inv_scale, k.shape)
        return gq, gk, gv

    out = _make(data, (q, k, v), backward)
    if return_weights:
        return out, weights
    return out


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "matmul": matmul,
    "exp": exp_,
    "log": log_,
    "gelu": gelu,
    "softplus": softplus,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "attention": attention,
    "sum": sum_,
    "mean": mean_,
}


def forward_primitive(op_kind, inputs, **kwargs):
    """Dispatch a primitive by name, validating inputs are finite."""
    if op_kind not in _PRIMITIVES:
        raise KeyError(f"unknown primitive {op_kind!r}")
    tensors = [_as_tensor(x) for x in inputs]
    for i, t in enumerate(tensors):
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"input {i} to {op_kind!r} contains NaN/Inf")
    return _PRIMITIVES[op_kind](*tensors, **kwargs)


def finite_diff_gradient(f, x, eps=1e-4):
    """Central-difference gradient of scalar f at x, one coordinate at a time.

    Test oracle; deliberately independent of the tape machinery.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base)))
        flat[i] = orig - eps
        fm = float(f(Tensor(base)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad)


# ---------------------------------------------------------------------------
# checkpoint serialization ("TWCK" format)
#
# Byte layout (all integers little-endian u32):
#   magic "TWCK" | version | repeated records until EOF:
#     name_len | name utf-8 | ndim | dims... | raw little-endian f32 payload

CHECKPOINT_MAGIC = b"TWCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_arrays, version=CHECKPOINT_VERSION):
    """Write named arrays as f32 in the TWCK container."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", version))
        for name, arr in named_arrays.items():
            arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
            payload = np.asarray(arr, dtype="<f4")  # tobytes() emits C order
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", payload.ndim))
            fh.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
            fh.write(payload.tobytes())


def load_checkpoint(path):
    """Read a TWCK container back into a dict of float arrays."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        while True:
            header = fh.read(4)
            if not header:
                break
            (name_len,) = struct.unpack("<I", header)
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            out[name] = data.astype(_default_dtype)
        return out
