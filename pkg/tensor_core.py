# tensor_core.py
# Reverse-mode autodiff over numpy arrays, limited to the layers the three
# conversion networks use, plus Adam and the HTVW checkpoint format.
#
# Ops executed inside an active Graph are recorded when at least one input
# is tracked (a parameter with requires_grad or the output of a recorded op).
# Outside a graph every op is a plain numpy computation, so inference
# runs with no recorded state, sharing parameters across threads.
import logging
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ComputationError, FormatError, ImageIOError, ParameterError, StateError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.1
NORM_EPS = 1e-5
DROPOUT_P = 0.5

_local = threading.local()


def get_default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def double_precision():
    """Create tensors in float64 inside this block (gradient checking)."""
    previous = get_default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else get_default_dtype())
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable


class Graph:
    """Tape of executed ops. Single writer; use one graph per forward/backward."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        stack = getattr(_local, "graphs", None)
        if stack is None:
            stack = _local.graphs = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.graphs.pop()
        return False

    @staticmethod
    def current():
        stack = getattr(_local, "graphs", None)
        return stack[-1] if stack else None

    def record(self, node: Node) -> None:
        if self.consumed:
            raise StateError("graph already backpropagated; call reset() before recording")
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise ComputationError(f"{op}: non-finite input")


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    graph = Graph.current()
    if graph is not None and any(t._tracked for t in inputs):
        out._tracked = True
        graph.record(Node(op, tuple(inputs), out, backward_fn))
    return out


# ---------- layers ----------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or weight.ndim != 4:
        raise ParameterError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    out_ch, in_ch, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ParameterError(f"conv2d kernel must be 1x1 or 3x3, got {k}x{k2}")
    if stride not in (1, 2):
        raise ParameterError(f"conv2d stride must be 1 or 2, got {stride}")
    if padding not in (0, 1):
        raise ParameterError(f"conv2d padding must be 0 or 1, got {padding}")
    if x.shape[1] != in_ch:
        raise ParameterError(f"conv2d input has {x.shape[1]} channels, weight expects {in_ch}")
    if bias is not None and bias.shape != (out_ch,):
        raise ParameterError(f"conv2d bias shape {bias.shape} != ({out_ch},)")
    _check_finite("conv2d", x.data, weight.data)

    xd, wd = x.data, weight.data
    B, C, H, W = xd.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ParameterError(f"conv2d input {H}x{W} too small for kernel {k}")

    if k == 1 and padding == 0:
        # per-pixel channel mixing, accumulated channel by channel so every pixel
        # goes through the same float operations in the same order
        xs = xd[:, :, ::stride, ::stride]
        cols = xs.reshape(B, C, Ho * Wo)
        w2 = wd.reshape(out_ch, in_ch)
        acc = np.zeros((B, out_ch, Ho * Wo), dtype=np.result_type(xd, wd))
        for c in range(C):
            acc += w2[:, c, None] * cols[:, None, c, :]
        out = acc.reshape(B, out_ch, Ho, Wo)

        def backward_fn(g):
            g2 = g.reshape(B, out_ch, Ho * Wo)
            gx_s = np.matmul(w2.T, g2).reshape(B, C, Ho, Wo)
            if stride == 1:
                gx = gx_s
            else:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = gx_s
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

        def backward_fn(g):
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                    gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += contrib
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb

    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        return _emit("conv2d", (x, weight, bias), out, backward_fn)
    return _emit("conv2d", (x, weight), out, lambda g: backward_fn(g)[:2])


def relu(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite("relu", x.data)
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.data.dtype), lambda g: (g * mask,))


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0 < slope < 1:
        raise ParameterError(f"leaky_relu slope must be in (0, 1), got {slope}")
    x = _as_tensor(x)
    _check_finite("leaky_relu", x.data)
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _emit("leaky_relu", (x,), x.data * factor, lambda g: (g * factor,))


def activation(x, kind: str = "relu", slope: float = LEAKY_SLOPE) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ParameterError(f"unknown activation {kind!r}")


def avg_pool(x, k: int = 2, stride: int = 2) -> Tensor:
    x = _as_tensor(x)
    if k != stride:
        raise ParameterError("avg_pool supports non-overlapping windows only (k == stride)")
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ParameterError(f"avg_pool: {H}x{W} not divisible by {k}")
    _check_finite("avg_pool", x.data)
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def backward_fn(g):
        spread = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (B, C, H // k, k, W // k, k))
        return (spread.reshape(B, C, H, W),)

    return _emit("avg_pool", (x,), out, backward_fn)


def global_avg_pool(x) -> Tensor:
    x = _as_tensor(x)
    B, C, H, W = x.shape
    if H < 1 or W < 1:
        raise ParameterError("global_avg_pool needs a non-empty raster")
    _check_finite("global_avg_pool", x.data)
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward_fn(g):
        return (np.broadcast_to(g / (H * W), x.shape).copy(),)

    return _emit("global_avg_pool", (x,), out, backward_fn)


def instance_norm(x, eps: float = NORM_EPS) -> Tensor:
    x = _as_tensor(x)
    B, C, H, W = x.shape
    if H * W < 2:
        raise ParameterError(f"instance_norm needs at least 2 pixels per channel, got {H}x{W}")
    _check_finite("instance_norm", x.data)
    xd = x.data
    mean = xd.mean(axis=(2, 3), keepdims=True)
    var = xd.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    n = H * W

    def backward_fn(g):
        gsum = g.sum(axis=(2, 3), keepdims=True)
        gxsum = (g * xhat).sum(axis=(2, 3), keepdims=True)
        return ((inv / n) * (n * g - gsum - xhat * gxsum),)

    return _emit("instance_norm", (x,), xhat.astype(xd.dtype), backward_fn)


def pixel_shuffle(x, r: int) -> Tensor:
    x = _as_tensor(x)
    B, C, H, W = x.shape
    if r < 1 or C % (r * r):
        raise ParameterError(f"pixel_shuffle: {C} channels not divisible by {r}^2")
    _check_finite("pixel_shuffle", x.data)
    c = C // (r * r)
    out = x.data.reshape(B, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, c, H * r, W * r)
    return _emit("pixel_shuffle", (x,), out, lambda g: (pixel_unshuffle(g, r),))


def pixel_unshuffle(arr: np.ndarray, r: int) -> np.ndarray:
    """Space-to-depth on a raw array; exact inverse of pixel_shuffle."""
    B, c, Hr, Wr = arr.shape
    if Hr % r or Wr % r:
        raise ParameterError(f"pixel_unshuffle: {Hr}x{Wr} not divisible by {r}")
    H, W = Hr // r, Wr // r
    return arr.reshape(B, c, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, c * r * r, H, W)


def feature_dropout(x, p: float = DROPOUT_P, training: bool = False, rng_seed=None) -> Tensor:
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0:
        return x
    _check_finite("feature_dropout", x.data)
    rng = np.random.default_rng(rng_seed)
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _emit("feature_dropout", (x,), x.data * keep, lambda g: (g * keep,))


def _channel_view(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None] if v.ndim == 1 else v[:, :, None, None]


def affine_modulate(x, scale, shift) -> Tensor:
    """Per-channel scale and shift; vectors are (C,) or per-sample (B, C)."""
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    B, C = x.shape[:2]
    for name, vec in (("scale", scale), ("shift", shift)):
        if vec.shape not in ((C,), (B, C)):
            raise ParameterError(f"affine_modulate {name} shape {vec.shape} does not match {C} channels")
    _check_finite("affine_modulate", x.data, scale.data, shift.data)
    s4, t4 = _channel_view(scale.data), _channel_view(shift.data)
    out = x.data * s4 + t4

    def backward_fn(g):
        gs = (g * x.data).sum(axis=(2, 3))
        gt = g.sum(axis=(2, 3))
        if scale.ndim == 1:
            gs = gs.sum(axis=0)
        if shift.ndim == 1:
            gt = gt.sum(axis=0)
        return g * s4, gs, gt

    return _emit("affine_modulate", (x, scale, shift), out, backward_fn)


def fully_connected(v, weight, bias) -> Tensor:
    v, weight, bias = _as_tensor(v), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 2 or v.ndim not in (1, 2) or weight.shape[1] != v.shape[-1]:
        raise ParameterError(f"fully_connected: weight {weight.shape} cannot take input {v.shape}")
    if bias.shape != (weight.shape[0],):
        raise ParameterError(f"fully_connected: bias {bias.shape} != ({weight.shape[0]},)")
    _check_finite("fully_connected", v.data, weight.data, bias.data)
    out = v.data @ weight.data.T + bias.data

    def backward_fn(g):
        gv = g @ weight.data
        if v.ndim == 1:
            gw = np.outer(g, v.data)
            gb = g
        else:
            gw = g.T @ v.data
            gb = g.sum(axis=0)
        return gv, gw, gb

    return _emit("fully_connected", (v, weight, bias), out, backward_fn)


def to_batch(arrays, dtype=None) -> Tensor:
    """Stack H x W x 3 rasters (or one raster) into an NCHW tensor."""
    arr = np.asarray(arrays)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ParameterError(f"expected HxWxC or NxHxWxC, got {arr.shape}")
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)


def from_batch(t) -> np.ndarray:
    """NCHW tensor back to float64 N x H x W x C rasters."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return data.transpose(0, 2, 3, 1).astype(np.float64)


def reshape(x, shape: tuple) -> Tensor:
    x = _as_tensor(x)
    original = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(original),))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ParameterError(f"add: shape mismatch {a.shape} vs {b.shape}")
    _check_finite("add", a.data, b.data)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ParameterError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    _check_finite("mul", a.data, b.data)
    return _emit("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


# ---------- losses ----------

def mse_loss(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ParameterError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    _check_finite("mse_loss", pred.data, target.data)
    diff = pred.data - target.data
    n = diff.size

    def backward_fn(g):
        grad = (2.0 / n) * diff * g
        return grad, -grad

    return _emit("mse_loss", (pred, target), np.asarray(np.mean(diff * diff)), backward_fn)


def l1_loss(pred, target, weight: float = 1.0) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ParameterError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    _check_finite("l1_loss", pred.data, target.data)
    diff = pred.data - target.data
    n = diff.size

    def backward_fn(g):
        grad = (weight / n) * np.sign(diff) * g
        return grad, -grad

    return _emit("l1_loss", (pred, target), np.asarray(weight * np.mean(np.abs(diff))), backward_fn)


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every requires_grad tensor reached from loss."""
    if graph.consumed:
        raise StateError("backward already ran on this graph; call graph.reset() first")
    if loss.data.size != 1:
        raise ParameterError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t._tracked:
                continue
            if t.requires_grad:
                t.grad += gi.astype(t.grad.dtype, copy=False)
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi
    graph.consumed = True
    logger.debug("backward through %d nodes", len(graph.nodes))


# ---------- optimisation ----------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> Sequence[Tensor]:
    """One bias-corrected Adam update, applied in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ParameterError("adam_step: params, grads and state are misaligned")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ParameterError(f"adam_step: gradient {g.shape} for parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    return params


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------- parameters ----------

def kaiming_uniform(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """He-uniform init over fan-in (all dims but the first)."""
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamSet:
    """Ordered, named collection of trainable tensors."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        t = Tensor(np.array(value, dtype=get_default_dtype()), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    @property
    def dtype(self):
        first = next(iter(self.tensors.values()), None)
        return first.data.dtype if first is not None else get_default_dtype()

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_state_dict(self, arrays: dict) -> None:
        missing = set(self.tensors) - set(arrays)
        extra = set(arrays) - set(self.tensors)
        if missing or extra:
            raise ParameterError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self.tensors.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise ParameterError(f"{name}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.data.dtype)
            t.zero_grad()

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())


# ---------- checkpoint file ----------

CHECKPOINT_MAGIC = b"HTVW"
CHECKPOINT_VERSION = 1


def encode_checkpoint(arrays: dict) -> bytes:
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<HI", CHECKPOINT_VERSION, len(arrays))
    for name, value in arrays.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        buf += struct.pack("<H", len(encoded)) + encoded
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    return bytes(buf)


def decode_checkpoint(blob: bytes, path=None) -> dict[str, np.ndarray]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", path=path, offset=0)
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", path=path, offset=4)
        pos = 10
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 4 * size > len(blob):
                raise ImageIOError(f"truncated array {name!r}", path=path, offset=pos)
            arrays[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except struct.error as exc:
        raise ImageIOError(f"truncated checkpoint: {exc}", path=path, offset=len(blob))
    return arrays


def save_checkpoint(path, arrays: dict) -> None:
    from utils import atomic_write_bytes

    atomic_write_bytes(path, encode_checkpoint(arrays))
    logger.info("wrote checkpoint %s (%d arrays)", path, len(arrays))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read checkpoint: {exc.strerror}", path=path) from exc
    return decode_checkpoint(blob, path=path)


# ---------- gradient checking ----------

def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar-valued fn with respect to t.data."""
    grad = np.zeros_like(t.data)
    for idx in np.ndindex(t.shape):
        original = t.data[idx]
        t.data[idx] = original + h
        plus = float(fn().data)
        t.data[idx] = original - h
        minus = float(fn().data)
        t.data[idx] = original
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def gradcheck(fn: Callable[..., Tensor], tensors: Sequence[Tensor], h: float = 1e-4) -> float:
    """
    Compare backward() against central differences for every tensor in
    ``tensors`` (all requires_grad). Returns the worst relative error.
    """
    for t in tensors:
        t.zero_grad()
    with Graph() as graph:
        loss = fn(*tensors)
    backward(graph, loss)
    worst = 0.0
    for t in tensors:
        numeric = numerical_gradient(lambda: fn(*tensors), t, h)
        worst = max(worst, max_relative_error(t.grad, numeric))
    return worst
