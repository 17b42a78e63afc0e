"""Tape-based reverse-mode automatic differentiation on float64 arrays.

A deliberately small, auditable primitive set: no implicit broadcasting
(shapes must match exactly except where an op defines otherwise), float64
everywhere, and every op's gradient is verified against central finite
differences in the test suite. One Tape per loss evaluation; independent
tapes may be used from separate threads.
"""
from __future__ import annotations

import json
import math
import struct
from typing import Callable, Iterable

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

# Additive attention-mask value for disallowed positions. Finite (so op
# boundaries still reject NaN/Inf) but far below the underflow threshold of
# exp(), which makes masked softmax weights exactly 0.0.
MASK_OFF = -1.0e30


class Tensor:
    """Float64 array plus the bookkeeping reverse mode needs.

    A Tensor with ``tape=None`` is a constant: ops on constants are computed
    but not recorded, which keeps pure inference cheap and bit-identical to
    the recorded path.
    """

    __slots__ = ("data", "tape", "name", "grad")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None,
                 _checked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked and not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor{' ' + repr(name) if name else ''}")
        self.data = arr
        self.tape = tape
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, tracked={self.tape is not None})"


class Tape:
    """Records primitive applications in execution order for reverse replay.

    The recording order is a valid topological order, so backward() is a
    single reversed sweep. After backward() the tape is spent and refuses
    further recording.
    """

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._spent = False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        if self._spent:
            raise RuntimeError("tape already consumed by backward()")
        self._nodes.append((out, inputs, vjp))

    def backward(self, root: Tensor) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar root.

        Returns gradients keyed by tensor name for every named leaf that the
        root depends on, and sets ``.grad`` on every tensor in the graph.
        The tape is cleared afterwards.
        """
        if root.tape is not self:
            raise ValueError("backward root was not recorded on this tape")
        if root.data.shape != ():
            raise ValueError(f"backward root must be a scalar, got shape {root.data.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=np.float64)}
        tensors: dict[int, Tensor] = {id(root): root}
        produced = {id(out) for out, _, _ in self._nodes}
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None:
                    continue
                key = id(inp)
                tensors[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        named: dict[str, np.ndarray] = {}
        for key, tensor in tensors.items():
            tensor.grad = grads[key]
            if tensor.name is not None and id(tensor) not in produced:
                named[tensor.name] = grads[key]
        self._nodes.clear()
        self._spent = True
        return named


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Free-function form of Tape.backward."""
    if root.tape is None:
        raise ValueError("cannot backward through an untracked tensor")
    return root.tape.backward(root)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], make_vjp) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise ValueError(f"{op}: non-finite result")
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError(f"{op}: inputs recorded on different tapes")
            tape = t.tape
    out = Tensor(out_data, tape, _checked=True)
    if tape is not None:
        tape.record(out, inputs, make_vjp())
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def affine(x, w, b=None) -> Tensor:
    """x @ w (+ b). x is a vector (n,) or a row-stack (T, n); w is (n, k)."""
    x, w = _wrap(x), _wrap(w)
    if w.data.ndim != 2:
        raise ValueError(f"affine: weight must be 2-d, got {w.data.shape}")
    if x.data.ndim not in (1, 2) or x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"affine: shape mismatch {x.data.shape} vs {w.data.shape}")
    if b is not None:
        b = _wrap(b)
        if b.data.shape != (w.data.shape[1],):
            raise ValueError(f"affine: bias shape {b.data.shape} does not match output {w.data.shape[1]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    xd, wd = x.data, w.data
    if b is None:
        def make_vjp():
            def vjp(g):
                if xd.ndim == 1:
                    return wd @ g, np.outer(xd, g)
                return g @ wd.T, xd.T @ g
            return vjp
        return _result("affine", out, (x, w), make_vjp)

    def make_vjp():
        def vjp(g):
            if xd.ndim == 1:
                return wd @ g, np.outer(xd, g), g
            return g @ wd.T, xd.T @ g, g.sum(axis=0)
        return vjp
    return _result("affine", out, (x, w, b), make_vjp)


def tanh(x) -> Tensor:
    x = _wrap(x)
    y = np.tanh(x.data)

    def make_vjp():
        def vjp(g):
            return (g * (1.0 - y * y),)
        return vjp
    return _result("tanh", y, (x,), make_vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    x = _wrap(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    y = 0.5 * xd * (1.0 + th)

    def make_vjp():
        def vjp(g):
            sech2 = 1.0 - th * th
            d = 0.5 * (1.0 + th) + 0.5 * xd * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
            return (g * d,)
        return vjp
    return _result("gelu", y, (x,), make_vjp)


def exp(x) -> Tensor:
    x = _wrap(x)
    y = np.exp(x.data)

    def make_vjp():
        def vjp(g):
            return (g * y,)
        return vjp
    return _result("exp", y, (x,), make_vjp)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only through the interior."""
    x = _wrap(x)
    if not lo < hi:
        raise ValueError(f"clip: empty interval [{lo}, {hi}]")
    y = np.clip(x.data, lo, hi)
    xd = x.data

    def make_vjp():
        def vjp(g):
            return (g * ((xd > lo) & (xd < hi)),)
        return vjp
    return _result("clip", y, (x,), make_vjp)


def minimum(a, b) -> Tensor:
    """Elementwise min; subgradient routes to the first argument on ties."""
    a, b = _wrap(a), _wrap(b)
    _require_same_shape("minimum", a, b)
    take_a = a.data <= b.data
    y = np.where(take_a, a.data, b.data)

    def make_vjp():
        def vjp(g):
            return g * take_a, g * ~take_a
        return vjp
    return _result("minimum", y, (a, b), make_vjp)


def softmax(x) -> Tensor:
    """Softmax along the last axis."""
    x = _wrap(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def make_vjp():
        def vjp(g):
            dot = np.sum(g * y, axis=-1, keepdims=True)
            return (y * (g - dot),)
        return vjp
    return _result("softmax", y, (x,), make_vjp)


def attention(q, k, v, mask: np.ndarray | None = None, scale: float | None = None) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T * scale + mask) v.

    q is (Tq, d), k is (Tk, d), v is (Tk, dv); mask is an additive constant
    of shape (Tq, Tk). Positions masked with MASK_OFF get weight exactly 0.0
    (exp underflow), so neither values nor gradients flow from them.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ValueError("scaled-dot-attention: q, k, v must be 2-d")
    if q.data.shape[1] != k.data.shape[1] or k.data.shape[0] != v.data.shape[0]:
        raise ValueError(
            f"scaled-dot-attention: shape mismatch q={q.data.shape} k={k.data.shape} v={v.data.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.data.shape[1])
    scores = (q.data @ k.data.T) * scale
    if mask is not None:
        if mask.shape != scores.shape:
            raise ValueError(f"scaled-dot-attention: mask shape {mask.shape} vs scores {scores.shape}")
        scores = scores + mask
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = p @ v.data
    qd, kd, vd = q.data, k.data, v.data

    def make_vjp():
        def vjp(g):
            dv = p.T @ g
            dp = g @ vd.T
            ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
            dq = (ds @ kd) * scale
            dk = (ds.T @ qd) * scale
            return dq, dk, dv
        return vjp
    return _result("scaled-dot-attention", out, (q, k, v), make_vjp)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _require_same_shape("add", a, b)

    def make_vjp():
        def vjp(g):
            return g, g
        return vjp
    return _result("add", a.data + b.data, (a, b), make_vjp)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _require_same_shape("sub", a, b)

    def make_vjp():
        def vjp(g):
            return g, -g
        return vjp
    return _result("sub", a.data - b.data, (a, b), make_vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def make_vjp():
        def vjp(g):
            return g * bd, g * ad
        return vjp
    return _result("mul", ad * bd, (a, b), make_vjp)


def scale(x, c: float) -> Tensor:
    """Multiply by a python constant (not differentiated w.r.t. c)."""
    x = _wrap(x)
    c = float(c)

    def make_vjp():
        def vjp(g):
            return (g * c,)
        return vjp
    return _result("scale", x.data * c, (x,), make_vjp)


def tsum(x) -> Tensor:
    """Sum all elements down to a scalar."""
    x = _wrap(x)
    shp = x.data.shape

    def make_vjp():
        def vjp(g):
            return (np.full(shp, float(g)),)
        return vjp
    return _result("sum", np.asarray(x.data.sum()), (x,), make_vjp)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements, as a scalar."""
    a, b = _wrap(a), _wrap(b)
    _require_same_shape("mean-squared-error", a, b)
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.sum(diff * diff) / n)

    def make_vjp():
        def vjp(g):
            ga = (2.0 / n) * float(g) * diff
            return ga, -ga
        return vjp
    return _result("mean-squared-error", out, (a, b), make_vjp)


def gauss_logpdf_value(x: np.ndarray, mean: np.ndarray, scl: float) -> float:
    """Closed-form diagonal Gaussian log density, shared with flows so the
    tracked and untracked paths are bit-identical."""
    z = (x - mean) / scl
    return float(-0.5 * np.sum(z * z) - x.size * (math.log(scl) + 0.5 * LOG_2PI))


def gaussian_logpdf(x, mean, scl: float) -> Tensor:
    """Diagonal Gaussian log density summed over dimensions; differentiable
    w.r.t. both the point and the mean."""
    x, mean = _wrap(x), _wrap(mean)
    _require_same_shape("gaussian-log-density", x, mean)
    scl = float(scl)
    if scl <= 0.0:
        raise ValueError(f"gaussian-log-density: scale must be positive, got {scl}")
    out = np.asarray(gauss_logpdf_value(x.data, mean.data, scl))
    xd, md = x.data, mean.data

    def make_vjp():
        def vjp(g):
            gx = float(g) * (md - xd) / (scl * scl)
            return gx, -gx
        return vjp
    return _result("gaussian-log-density", out, (x, mean), make_vjp)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    old = x.data.shape
    out = x.data.reshape(shape)

    def make_vjp():
        def vjp(g):
            return (g.reshape(old),)
        return vjp
    return _result("reshape", out, (x,), make_vjp)


def concat_rows(a, b) -> Tensor:
    """Stack two row matrices (na, d) and (nb, d) into (na+nb, d)."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ValueError(f"concat-rows: shape mismatch {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[0]

    def make_vjp():
        def vjp(g):
            return g[:na], g[na:]
        return vjp
    return _result("concat-rows", np.concatenate([a.data, b.data], axis=0), (a, b), make_vjp)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ValueError(f"slice-rows: expected 2-d input, got {x.data.shape}")
    n = x.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ValueError(f"slice-rows: bad range [{start}, {stop}) for {n} rows")
    shp = x.data.shape

    def make_vjp():
        def vjp(g):
            full = np.zeros(shp)
            full[start:stop] = g
            return (full,)
        return vjp
    return _result("slice-rows", x.data[start:stop].copy(), (x,), make_vjp)


OPS: dict[str, Callable] = {
    "affine": affine,
    "tanh": tanh,
    "gelu": gelu,
    "exp": exp,
    "clip": clip,
    "minimum": minimum,
    "softmax": softmax,
    "scaled-dot-attention": attention,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "sum": tsum,
    "mean-squared-error": mse,
    "gaussian-log-density": gaussian_logpdf,
    "reshape": reshape,
    "concat-rows": concat_rows,
    "slice-rows": slice_rows,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a registered primitive by name."""
    if kind not in OPS:
        raise ValueError(f"unknown primitive {kind!r}; registered: {sorted(OPS)}")
    return OPS[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Parameters, optimizer, checkpoints
# ---------------------------------------------------------------------------

class ParamStore:
    """Named float64 parameter tensors plus AdamW moment buffers."""

    def __init__(self) -> None:
        self._params: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.asarray(value, dtype=np.float64).copy()
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite initial value for parameter {name!r}")
        self._params[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def raw(self) -> dict[str, np.ndarray]:
        """Parameter arrays for untracked inference."""
        return dict(self._params)

    def tracked(self, tape: Tape) -> dict[str, Tensor]:
        """Leaf tensors recorded on `tape`, keyed and named by parameter."""
        return {n: Tensor(v, tape, name=n, _checked=True) for n, v in self._params.items()}

    def clone(self) -> "ParamStore":
        """Copy of the parameters with fresh (empty) optimizer state."""
        out = ParamStore()
        for n, v in self._params.items():
            out.add(n, v)
        return out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(v) for n, v in self._params.items()}

    def moment_shapes_ok(self) -> bool:
        return all(self._m[n].shape == p.shape and self._v[n].shape == p.shape
                   for n, p in self._params.items() if n in self._m)


def adamw_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
               weight_decay: float = 0.01, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> ParamStore:
    """One decoupled-weight-decay adaptive update, in place."""
    if set(grads) != set(store._params):
        missing = set(store._params) - set(grads)
        extra = set(grads) - set(store._params)
        raise ValueError(f"adamw_step: gradient keys mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store._params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: gradient shape {g.shape} vs parameter {p.shape} for {name!r}")
        if name not in store._m:
            store._m[name] = np.zeros_like(p)
            store._v[name] = np.zeros_like(p)
        m = store._m[name]
        v = store._v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p)
    return store


CHECKPOINT_MAGIC = b"FLOWCKP1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    """Versioned binary checkpoint: magic, version, JSON manifest with
    names/shapes, then raw little-endian float64 data. Bit-exact round trip."""
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "params": [{"name": n, "shape": list(v.shape)} for n, v in store.items()],
        "meta": meta or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for _, v in store.items():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        manifest = json.loads(f.read(header_len).decode("utf-8"))
        store = ParamStore()
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"truncated checkpoint data for {entry['name']!r}")
            store.add(entry["name"], np.frombuffer(buf, dtype="<f8").reshape(shape))
    return store, manifest.get("meta", {})


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def finite_difference(f: Callable[[list[np.ndarray]], float], args: list[np.ndarray],
                      wrt: int, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function w.r.t. args[wrt]."""
    base = [np.array(a, dtype=np.float64) for a in args]
    grad = np.zeros_like(base[wrt])
    flat = base[wrt].reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(base)
        flat[i] = orig - eps
        fm = f(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(want))) if want.size else 0.0, 1e-10)
    return float(np.max(np.abs(got - want))) / denom if got.size else 0.0


def check_gradients(build: Callable[[list[Tensor]], Tensor], args: list[np.ndarray],
                    eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of a scalar-valued graph over all inputs."""
    tape = Tape()
    tensors = [Tensor(a, tape) for a in args]
    root = build(tensors)
    tape.backward(root)
    worst = 0.0
    for i, t in enumerate(tensors):
        ad = t.grad if t.grad is not None else np.zeros_like(t.data)

        def scalar(xs, _i=i):
            tp = Tape()
            ts = [Tensor(x, tp) for x in xs]
            return build(ts).item()

        fd = finite_difference(scalar, args, i, eps)
        worst = max(worst, relative_error(ad, fd))
    return worst
