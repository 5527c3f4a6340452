"""
Dense tensor math with reverse-mode differentiation
Tensors wrap numpy arrays; a Tape records every op whose inputs it watches,
and backward() replays the tape in reverse. AdamW lives here too.
"""

import logging
import builtins
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from tvts.errors import ConfigError, ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

MASK_FILL = -1e9
MASKED_WEIGHT_LIMIT = 1e-30

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64


def set_default_dtype(name: str) -> None:
    """Switch the float width used for new tensors ("float64" or "float32")"""
    global _default_dtype
    if name not in _DTYPES:
        raise ConfigError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> type:
    return _default_dtype


class Tensor:
    """Immutable n-d array, optionally tracked by a Tape"""

    __slots__ = ("data", "node_id", "_tape")

    def __init__(self, data: ArrayLike, dtype: Optional[type] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if any(extent < 1 for extent in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: float) -> "Tensor":
        return scale(self, float(other))

    def __truediv__(self, other: float) -> "Tensor":
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)


@dataclass
class TapeEntry:
    """One recorded op: input node ids (None when untracked) and its gradient rule"""
    inputs: Tuple[Optional[int], ...]
    output: int
    name: str
    rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_ACTIVE_TAPES: List["Tape"] = []


class Tape:
    """
    Reverse-mode computation graph.

    Use as a context manager; while active, ops on watched tensors append a
    TapeEntry. Entries are appended in execution order, so the list is already
    topologically sorted.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._leaves: Dict[int, Tensor] = {}
        self._next_id = 0

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def _new_id(self) -> int:
        node = self._next_id
        self._next_id += 1
        return node

    def watch(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        """Start tracking x as a leaf; returns the tracked tensor"""
        if not isinstance(x, Tensor) or x.tracked:
            x = Tensor(x.data if isinstance(x, Tensor) else x)
        x.node_id = self._new_id()
        x._tape = self
        self._leaves[x.node_id] = x
        return x

    def watch_all(self, arrays: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
        return {name: self.watch(arr) for name, arr in arrays.items()}

    @property
    def leaves(self) -> Dict[int, Tensor]:
        return dict(self._leaves)

    def __len__(self) -> int:
        return len(self.entries)


def _active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name: str, out: np.ndarray, inputs: Sequence[Tensor],
            rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = out
    result.node_id = None
    result._tape = None
    tape = _active_tape()
    if tape is None:
        return result
    ids = tuple(t.node_id if (t._tape is tape) else None for t in inputs)
    if all(node is None for node in ids):
        return result
    result.node_id = tape._new_id()
    result._tape = tape
    tape.entries.append(TapeEntry(inputs=ids, output=result.node_id, name=name, rule=rule))
    return result


class GradientMap(Mapping):
    """Gradients of one backward pass, keyed by watched tensor or node id"""

    def __init__(self, grads: Dict[int, np.ndarray]):
        self._grads = grads

    def _key(self, key: Union[Tensor, int]) -> int:
        if isinstance(key, Tensor):
            if key.node_id is None:
                raise KeyError("tensor is not tracked")
            return key.node_id
        return key

    def __getitem__(self, key: Union[Tensor, int]) -> np.ndarray:
        return self._grads[self._key(key)]

    def __contains__(self, key) -> bool:
        try:
            return self._key(key) in self._grads
        except KeyError:
            return False

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def by_name(self, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
        return {name: self[t] for name, t in params.items()}

    def global_norm(self) -> float:
        return global_norm(self._grads.values())


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Reverse sweep from a scalar loss; returns gradients for every watched leaf"""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {}
    if loss._tape is tape and loss.node_id is not None:
        grads[loss.node_id] = np.ones_like(loss.data)
        for entry in reversed(tape.entries):
            g = grads.pop(entry.output, None)
            if g is None:
                continue
            input_grads = entry.rule(g)
            for node, ig in zip(entry.inputs, input_grads):
                if node is None or ig is None:
                    continue
                grads[node] = grads[node] + ig if node in grads else ig
    return GradientMap({
        node: grads[node] if node in grads else np.zeros_like(leaf.data)
        for node, leaf in tape._leaves.items()
    })


# -----------------------------------------------------------------------------
# Shape helpers
# -----------------------------------------------------------------------------

def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim == 0 or (b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape):
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def global_norm(arrays) -> float:
    return float(math.sqrt(builtins.sum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays)))


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape((-1,) + shape).sum(axis=0)


# -----------------------------------------------------------------------------
# Elementwise and structural ops
# -----------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a, b, "add")
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a, b, "mul")
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (g * b.data, _reduce_to(g * a.data, b.shape)))


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = _as_tensor(a)
    return _record("scale", a.data * factor, (a,), lambda g: (g * factor,))


def neg(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Trailing-axis product: a[..., k] @ b[k, n] -> [..., n]"""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def rule(g: np.ndarray):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, b.shape[0]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _record("matmul", out, (a, b), rule)


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: ArrayLike, index) -> Tensor:
    """Indexing and gather; repeated indices accumulate gradient"""
    a = _as_tensor(a)
    out = np.array(a.data[index], dtype=a.dtype, copy=True)
    basic = _is_basic_index(index)

    def rule(g: np.ndarray):
        z = np.zeros_like(a.data)
        if basic:
            z[index] = g
        else:
            np.add.at(z, index, g)
        return (z,)

    return _record("getitem", out, (a,), rule)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def expand(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Broadcast a over new leading axes so its shape becomes `shape`"""
    a = _as_tensor(a)
    shape = tuple(shape)
    if len(shape) < a.ndim or shape[len(shape) - a.ndim:] != a.shape:
        raise DimensionError(f"expand: {a.shape} does not match the trailing axes of {shape}")
    out = np.array(np.broadcast_to(a.data, shape), copy=True)
    return _record("expand", out, (a,), lambda g: (_reduce_to(g, a.shape),))


def sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def rule(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", out, (a,), rule)


def mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


# -----------------------------------------------------------------------------
# Nonlinearities
# -----------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def _gelu_fwd(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x ** 3)))


def _gelu_bwd(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def gelu(a: ArrayLike) -> Tensor:
    """GELU, tanh approximation"""
    a = _as_tensor(a)
    return _record("gelu", _gelu_fwd(a.data), (a,), lambda g: (_gelu_bwd(g, a.data),))


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: input contains NaN or Inf")


def _softmax_fwd(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_bwd(g: np.ndarray, y: np.ndarray, axis: int) -> np.ndarray:
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.data, "softmax")
    y = _softmax_fwd(a.data, axis)
    return _record("softmax", y, (a,), lambda g: (_softmax_bwd(g, y, axis),))


def _log_softmax_bwd(g: np.ndarray, y: np.ndarray, axis: int) -> np.ndarray:
    return g - np.exp(y) * g.sum(axis=axis, keepdims=True)


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.data, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _record("log_softmax", y, (a,), lambda g: (_log_softmax_bwd(g, y, axis),))


def _layer_norm_bwd(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    gx_hat = g * gain
    gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
    g_gain = _reduce_to(g * xhat, gain.shape)
    g_bias = _reduce_to(g, gain.shape)
    return gx, g_gain, g_bias


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias"""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    _check_finite(x.data, "layer_norm")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    return _record("layer_norm", out, (x, gain, bias),
                   lambda g: _layer_norm_bwd(g, xhat, inv, gain.data))


def _l2_normalize_bwd(g: np.ndarray, x: np.ndarray, norm: np.ndarray, denom: np.ndarray) -> np.ndarray:
    dot = (g * x).sum(axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    correction = np.where(norm > 0, x * dot / (denom * denom * safe), 0.0)
    return g / denom - correction


def l2_normalize(a: ArrayLike, eps: float = 1e-12) -> Tensor:
    """x / (||x|| + eps) along the last axis"""
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = norm + eps
    return _record("l2_normalize", a.data / denom, (a,),
                   lambda g: (_l2_normalize_bwd(g, a.data, norm, denom),))


# -----------------------------------------------------------------------------
# Attention
# -----------------------------------------------------------------------------

def _expand_mask(mask: Optional[np.ndarray], batch: int, tq: int, tk: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == (tk,):
        mask = np.broadcast_to(mask, (batch, tk))
    if mask.shape == (batch, tk):
        return np.broadcast_to(mask[:, None, None, :], (batch, 1, tq, tk))
    if mask.shape == (tq, tk):
        mask = np.broadcast_to(mask, (batch, tq, tk))
    if mask.shape == (batch, tq, tk):
        return mask[:, None, :, :]
    raise DimensionError(f"attention mask shape {mask.shape} fits neither keys ({tk},) nor scores ({tq}, {tk})")


def _attention_bwd(g: np.ndarray, qh: np.ndarray, kh: np.ndarray, vh: np.ndarray,
                   weights: np.ndarray, scale_factor: float):
    # g: (B, Tq, H, d); weights: (B, H, Tq, Tk)
    g_weights = np.einsum("bqhd,bkhd->bhqk", g, vh)
    g_scores = weights * (g_weights - (weights * g_weights).sum(axis=-1, keepdims=True))
    gq = scale_factor * np.einsum("bhqk,bkhd->bqhd", g_scores, kh)
    gk = scale_factor * np.einsum("bhqk,bqhd->bkhd", g_scores, qh)
    gv = np.einsum("bhqk,bqhd->bkhd", weights, g)
    return gq, gk, gv


def multi_head_attention(q: ArrayLike, k: ArrayLike, v: ArrayLike, heads: int,
                         attn_mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Scaled dot-product attention split over `heads`.

    q is (B, Tq, D) or (Tq, D); k and v are (B, Tk, D) or (Tk, D).
    attn_mask marks DISALLOWED keys with True, either per key ((B, Tk) / (Tk,))
    or per score ((B, Tq, Tk) / (Tq, Tk)). Masked keys get exactly zero weight.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3 or k.shape != v.shape \
            or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise DimensionError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    batch, tq, width = q.shape
    tk = k.shape[1]
    if heads < 1 or width % heads != 0:
        raise ConfigError(f"attention width {width} is not divisible by {heads} heads")
    dh = width // heads
    scale_factor = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(batch, tq, heads, dh)
    kh = k.data.reshape(batch, tk, heads, dh)
    vh = v.data.reshape(batch, tk, heads, dh)
    scores = np.einsum("bqhd,bkhd->bhqk", qh, kh) * scale_factor
    mask = _expand_mask(attn_mask, batch, tq, tk)
    if mask is not None:
        scores = scores + np.where(mask, MASK_FILL, 0.0).astype(scores.dtype)
    weights = _softmax_fwd(scores, axis=-1)
    if mask is not None:
        leaked = np.where(np.broadcast_to(mask, weights.shape), weights, 0.0)
        if np.any(leaked >= MASKED_WEIGHT_LIMIT):
            raise NumericError("attention: a masked key kept non-zero weight (is every key masked?)")
    out = np.einsum("bhqk,bkhd->bqhd", weights, vh).reshape(batch, tq, width)

    def rule(g: np.ndarray):
        gq, gk, gv = _attention_bwd(g.reshape(batch, tq, heads, dh), qh, kh, vh, weights, scale_factor)
        return gq.reshape(q.shape), gk.reshape(k.shape), gv.reshape(v.shape)

    result = _record("attention", out, (q, k, v), rule)
    return reshape(result, (tq, width)) if squeeze else result


# -----------------------------------------------------------------------------
# Finite differences
# -----------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], Union[Tensor, float]], x: ArrayLike, h: float = 1e-5,
                     indices: Optional[Sequence[Tuple[int, ...]]] = None) -> Tensor:
    """
    Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.

    With `indices`, only those coordinates are probed and the result has shape
    (len(indices),); otherwise it has x's shape.
    """
    if h <= 0:
        raise ConfigError(f"finite difference step must be > 0, got {h}")
    base = np.array(_as_tensor(x).data, dtype=np.float64, copy=True)
    coords = list(np.ndindex(base.shape)) if indices is None else [tuple(i) for i in indices]

    def evaluate(arr: np.ndarray) -> float:
        value = f(Tensor(arr))
        return float(value.data.reshape(-1)[0]) if isinstance(value, Tensor) else float(value)

    out = np.zeros(len(coords), dtype=np.float64)
    for n, coord in enumerate(coords):
        original = base[coord]
        base[coord] = original + h
        plus = evaluate(base.copy())
        base[coord] = original - h
        minus = evaluate(base.copy())
        base[coord] = original
        out[n] = (plus - minus) / (2.0 * h)
    return Tensor(out.reshape(base.shape) if indices is None else out, dtype=np.float64)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max |a - b| / max(|a|, |b|, floor)"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


# -----------------------------------------------------------------------------
# Parameters and AdamW
# -----------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling"""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(_default_dtype)


def as_tensors(arrays: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    """Untracked tensor views of a parameter dict"""
    return {name: Tensor(arr) for name, arr in arrays.items()}


@dataclass
class AdamWState:
    """Per-parameter moments plus the step counter"""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def init(cls, params: Mapping[str, np.ndarray]) -> "AdamWState":
        return cls(m={n: np.zeros_like(p) for n, p in params.items()},
                   v={n: np.zeros_like(p) for n, p in params.items()},
                   step=0)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamWState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> Tuple[Dict[str, np.ndarray], AdamWState]:
    """
    One AdamW update. Decay is decoupled: w <- w(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps).
    Inputs are not modified; missing gradients count as zero.
    """
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params: Dict[str, np.ndarray] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, w in params.items():
        g = grads.get(name)
        g = np.zeros_like(w) if g is None else np.asarray(g, dtype=w.dtype)
        m_prev = state.m.get(name, np.zeros_like(w))
        v_prev = state.v.get(name, np.zeros_like(w))
        if g.shape != w.shape or m_prev.shape != w.shape or v_prev.shape != w.shape:
            raise DimensionError(f"adamw: shapes for {name!r} disagree: param {w.shape}, grad {g.shape}")
        m = beta1 * m_prev + (1.0 - beta1) * g
        v = beta2 * v_prev + (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = (w * (1.0 - lr * weight_decay) - lr * update).astype(w.dtype)
        new_m[name] = m.astype(w.dtype)
        new_v[name] = v.astype(w.dtype)
    return new_params, AdamWState(m=new_m, v=new_v, step=t)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients so their global L2 norm is at most max_norm"""
    total = global_norm(grads.values())
    if max_norm <= 0 or total <= max_norm:
        return dict(grads), total
    factor = max_norm / (total + 1e-12)
    return {n: g * factor for n, g in grads.items()}, total


