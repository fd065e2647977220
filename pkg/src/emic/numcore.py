"""Numeric substrate: float64 arrays with a recorded operation tape.

Arrays are plain ``numpy.ndarray`` (float64).  ``Tensor`` wraps one and, while a
``Tape`` is active, every primitive applied to a tracked tensor appends a node
holding its vector-Jacobian product.  ``backward`` replays those rules in
reverse order.  Forward values are computed by the same numpy code whether or
not a tape is recording, so taped and untaped results are identical.
"""
from __future__ import annotations

import io
import math
import struct
import zlib
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

PRNG_NAME = "philox4x64-10"

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of taped operations for one forward pass."""

    def __init__(self):
        self.nodes: List[Tuple["Tensor", Tuple["Tensor", ...], Callable]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


_TAPES: List[Tape] = []


def _current_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "name", "tracked", "__weakref__")

    def __init__(self, data, name: Optional[str] = None, tracked: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name
        self.tracked = tracked

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    return out


def _make(out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap a primitive's output and record it if any input is tracked."""
    _check_finite(out, op)
    tape = _current_tape()
    if tape is not None and any(t.tracked for t in inputs):
        res = Tensor(out, tracked=True)
        tape.nodes.append((res, tuple(inputs), vjp))
        return res
    return Tensor(out)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)), "div")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def log2(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log2(ad), (a,), lambda g: (g / (ad * math.log(2.0)),), "log2")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.logaddexp(0.0, ad), (a,), lambda g: (g * special.expit(ad),), "softplus")


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    ad = a.data
    cdf = special.ndtr(ad)
    return _make(ad * cdf, (a,),
                 lambda g: (g * (cdf + ad * _INV_SQRT2PI * np.exp(-0.5 * ad * ad)),), "gelu")


def normal_cdf(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(special.ndtr(ad), (a,),
                 lambda g: (g * _INV_SQRT2PI * np.exp(-0.5 * ad * ad),), "normal_cdf")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def maximum(a, floor: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    keep = ad >= floor
    return _make(np.maximum(ad, floor), (a,), lambda g: (g * keep,), "maximum")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take_rows(a, rows) -> Tensor:
    """Select rows (first axis) by integer index array."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return _make(a.data[rows], (a,), vjp, "take_rows")


def select(a, i: int) -> Tensor:
    """``a[i]`` along the first axis."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return _make(a.data[i], (a,), vjp, "select")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _make(a.data[..., start:stop], (a,), vjp, "slice_cols")


def pad_rows(a, total: int) -> Tensor:
    """Append zero rows so the first axis has length ``total``."""
    a = as_tensor(a)
    n = a.shape[0]
    out = np.zeros((total,) + a.shape[1:])
    out[:n] = a.data
    return _make(out, (a,), lambda g: (g[:n],), "pad_rows")


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(np.matmul(ad, bd), (a, b), vjp, "matmul")


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, with the row max subtracted first."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),), "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gain.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), vjp, "layer_norm")


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor, params: Optional["ModelParams"] = None) -> Dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every named tensor on the tape.

    With ``params`` given, every parameter gets an entry; unreachable ones are
    zero arrays.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    named: Dict[int, Tensor] = {}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if not t.tracked:
                continue
            k = id(t)
            grads[k] = grads[k] + gi if k in grads else gi
            if t.name is not None:
                named[k] = t
    result: Dict[str, np.ndarray] = {}
    for k, t in named.items():
        result[t.name] = grads[k]
    if params is not None:
        for name, p in params.items():
            result.setdefault(name, np.zeros_like(p.data))
            if result[name].shape != p.shape:
                result[name] = np.broadcast_to(result[name], p.shape).copy()
    return result


# ---------------------------------------------------------------------------
# randomness


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every random draw in the package."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def prng_normal(rng, shape, std: float) -> np.ndarray:
    if std < 0:
        raise ValueError("prng_normal: std must be >= 0")
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    return rng.standard_normal(shape) * std


# ---------------------------------------------------------------------------
# parameters


class ModelParams:
    """Named store of trainable tensors plus the seed that initialised them."""

    MAGIC = b"EMPW"
    VERSION = 1

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.prng = PRNG_NAME
        self.rng = make_rng(self.seed)
        self._store: Dict[str, Tensor] = {}
        # non-trainable entries (names start with "__"), saved alongside the weights
        self.extra: Dict[str, np.ndarray] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __len__(self):
        return len(self._store)

    def items(self):
        return self._store.items()

    def names(self) -> List[str]:
        return list(self._store)

    def add(self, name: str, value) -> Tensor:
        if name in self._store:
            raise KeyError(f"duplicate parameter name {name!r}")
        # float32-representable values so a save/load cycle is exact
        data = np.asarray(value, dtype=np.float64).astype(np.float32).astype(np.float64)
        t = Tensor(data, name=name, tracked=True)
        self._store[name] = t
        return t

    def normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        return self.add(name, prng_normal(self.rng, shape, std))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def narrow(self) -> "ModelParams":
        """Round every value to float32 in place, matching what the file stores."""
        for t in self._store.values():
            t.data = t.data.astype(np.float32).astype(np.float64)
        return self

    def count(self) -> int:
        return int(sum(t.data.size for t in self._store.values()))

    def copy(self) -> "ModelParams":
        new = ModelParams(self.seed)
        for name, t in self._store.items():
            new._store[name] = Tensor(t.data.copy(), name=name, tracked=True)
        new.extra = {k: v.copy() for k, v in self.extra.items()}
        return new

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(self.MAGIC)
        entries = [(n, t.data) for n, t in self._store.items()] + list(self.extra.items())
        buf.write(struct.pack("<BI", self.VERSION, len(entries)))
        for name, data in entries:
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", data.ndim))
            buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
            buf.write(np.asarray(data).astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, seed: int = 0) -> "ModelParams":
        if blob[:4] != cls.MAGIC:
            raise ValueError("parameter file: bad magic")
        version, count = struct.unpack_from("<BI", blob, 4)
        if version != cls.VERSION:
            raise ValueError(f"parameter file: unsupported version {version}")
        pos = 9
        params = cls(seed)
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<H", blob, pos)
                pos += 2
                name = blob[pos:pos + n].decode("utf-8")
                pos += n
                (rank,) = struct.unpack_from("<B", blob, pos)
                pos += 1
                shape = struct.unpack_from(f"<{rank}I", blob, pos)
                pos += 4 * rank
                size = int(np.prod(shape, dtype=np.int64))
                data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos)
                pos += 4 * size
                value = data.astype(np.float64).reshape(shape)
                if name.startswith("__"):
                    params.extra[name] = value
                else:
                    params.add(name, value)
        except struct.error as exc:
            raise ValueError(f"parameter file: truncated ({exc})") from None
        if pos != len(blob):
            raise ValueError("parameter file: trailing bytes")
        return params

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def model_id(self) -> int:
        """32-bit CRC of the serialized parameter file."""
        return zlib.crc32(self.to_bytes()) & 0xFFFFFFFF


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        adam_step(params, grads, self.lr, self.beta1, self.beta2, self.eps, self.t, self.m, self.v)


def adam_step(params: ModelParams, grads: Dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, t: int = 1,
              m: Optional[Dict[str, np.ndarray]] = None,
              v: Optional[Dict[str, np.ndarray]] = None) -> ModelParams:
    """One in-place Adam update; ``m``/``v`` are the running moments (updated in place)."""
    if t < 1:
        raise ValueError("adam_step: t must be >= 1")
    m = {} if m is None else m
    v = {} if v is None else v
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        mi = m.get(name, 0.0) * beta1 + (1.0 - beta1) * g
        vi = v.get(name, 0.0) * beta2 + (1.0 - beta2) * g * g
        m[name], v[name] = mi, vi
        p.data = p.data - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
    return params

