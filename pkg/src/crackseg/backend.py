"""Reverse-mode differentiable ops over float32 NCHW feature maps.

The op set is exactly what the segmentation network needs: 2-D convolution,
ReLU / sigmoid, batch normalization, 2x max-pool and nearest-neighbor
upsample, elementwise add / mul, channel concatenation, and a global sum
that accumulates in float64 so the dice ratio stays stable. Every op
records a closure on the output node; `backward` walks the tape once and
accumulates gradients into the named leaf parameters.

Also home to the binary checkpoint container (magic ``R2AU``) that stores
the model configuration text plus every named array bit-exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ContractViolation(ValueError):
    """An op was invoked outside its documented shape/mode contract."""


class Tensor:
    """Array node on the autodiff tape.

    Leaves created with ``requires_grad=True`` (model parameters) keep a
    zero-initialized ``grad`` that `backward` accumulates into. Interior
    nodes carry a closure routing the incoming gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn", "_spent")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, np.generic):
            data = np.asarray(data)  # numpy scalar: keep its dtype (float64 loss math)
        elif not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(data) if requires_grad else None
        self._parents = ()
        self._grad_fn = None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # scalar sugar used by the loss arithmetic
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)


def param(data, name: str) -> Tensor:
    """Named trainable leaf (float32, zeroed grad)."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    return Tensor(arr, requires_grad=True, name=name)


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _node(data, parents, grad_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad, ref):
    """Sum `grad` down to the shape/dtype of `ref` (inverse of numpy broadcasting)."""
    shape = ref.shape
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.astype(ref.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(x: Tensor, y: Tensor) -> Tensor:
    try:
        out = x.data + y.data
    except ValueError:
        raise ContractViolation(f"add shape mismatch: {x.data.shape} vs {y.data.shape}") from None

    def grad_fn(g):
        return _unbroadcast(g, x.data), _unbroadcast(g, y.data)

    return _node(out, (x, y), grad_fn)


def mul(x: Tensor, y: Tensor) -> Tensor:
    try:
        out = x.data * y.data
    except ValueError:
        raise ContractViolation(f"mul shape mismatch: {x.data.shape} vs {y.data.shape}") from None

    def grad_fn(g):
        return _unbroadcast(g * y.data, x.data), _unbroadcast(g * x.data, y.data)

    return _node(out, (x, y), grad_fn)


def div(x: Tensor, y: Tensor) -> Tensor:
    try:
        out = x.data / y.data
    except ValueError:
        raise ContractViolation(f"div shape mismatch: {x.data.shape} vs {y.data.shape}") from None

    def grad_fn(g):
        gx = _unbroadcast(g / y.data, x.data)
        gy = _unbroadcast(-g * x.data / (y.data * y.data), y.data)
        return gx, gy

    return _node(out, (x, y), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def grad_fn(g):
        return (g * mask,)

    return _node(out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ev = np.exp(d[~pos])
    out[~pos] = ev / (1.0 + ev)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), grad_fn)


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    if x.data.ndim != 4 or y.data.ndim != 4:
        raise ContractViolation("concat_channels expects rank-4 inputs")
    bx, cx, hx, wx = x.data.shape
    by, cy, hy, wy = y.data.shape
    if (bx, hx, wx) != (by, hy, wy):
        raise ContractViolation(
            f"concat_channels batch/spatial mismatch: {x.data.shape} vs {y.data.shape}")
    out = np.concatenate([x.data, y.data], axis=1)

    def grad_fn(g):
        return g[:, :cx], g[:, cx:]

    return _node(out, (x, y), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    """Global sum, accumulated in double precision."""
    out = np.asarray(x.data.sum(dtype=np.float64))

    def grad_fn(g):
        return (np.full(x.data.shape, float(g), dtype=x.data.dtype),)

    return _node(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           pad: str = "same") -> Tensor:
    """2-D cross-correlation in NCHW layout.

    With ``pad="same"`` and stride 1 the spatial extents are preserved.
    Kernel spatial size must be odd; padding is symmetric (k-1)/2.
    """
    if x.data.ndim != 4:
        raise ContractViolation(f"conv2d input must be rank 4, got shape {x.data.shape}")
    if w.data.ndim != 4:
        raise ContractViolation(f"conv2d kernel must be rank 4, got shape {w.data.shape}")
    batch, cin, height, width = x.data.shape
    cout, cw, kh, kw = w.data.shape
    if cw != cin:
        raise ContractViolation(
            f"conv2d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractViolation(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ContractViolation(f"conv2d stride must be >= 1, got {stride}")
    if pad == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif pad == "valid":
        ph = pw = 0
    else:
        raise ContractViolation(f"conv2d pad must be 'same' or 'valid', got {pad!r}")
    if b is not None and b.data.shape != (cout,):
        raise ContractViolation(
            f"conv2d bias shape {b.data.shape} does not match out channels ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ContractViolation(
            f"conv2d input {x.data.shape} smaller than kernel {w.data.shape} after padding")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bchwuv,ocuv->bohw", win, w.data, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]
    h_out, w_out = out.shape[2], out.shape[3]
    parents = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        gw = np.einsum("bchwuv,bohw->ocuv", win, g, optimize=True)
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                tap = np.einsum("bohw,oc->bchw", g, w.data[:, :, u, v], optimize=True)
                gxp[:, :, u:u + h_out * stride:stride, v:v + w_out * stride:stride] += tap
        gx = gxp[:, :, ph:ph + height, pw:pw + width] if ph or pw else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _node(out, parents, grad_fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max-pool, stride 2. Gradient routes to the first argmax per window."""
    if x.data.ndim != 4:
        raise ContractViolation(f"maxpool2 input must be rank 4, got shape {x.data.shape}")
    batch, ch, height, width = x.data.shape
    if height % 2 or width % 2:
        raise ContractViolation(f"maxpool2 needs even spatial extents, got {height}x{width}")
    ho, wo = height // 2, width // 2
    windows = (x.data.reshape(batch, ch, ho, 2, wo, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(batch, ch, ho, wo, 4))
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (gw.reshape(batch, ch, ho, wo, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(batch, ch, height, width))
        return (gx,)

    return _node(out, (x,), grad_fn)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsample; doubles both spatial extents."""
    if x.data.ndim != 4:
        raise ContractViolation(f"upsample2 input must be rank 4, got shape {x.data.shape}")
    batch, ch, height, width = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def grad_fn(g):
        return (g.reshape(batch, ch, height, 2, width, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Running statistics, updated in place during train-mode forwards."""
    running_mean: np.ndarray
    running_var: np.ndarray


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over (batch, H, W).

    Train mode normalizes with the current batch statistics (biased
    variance) and folds them into the running stats as
    ``running = momentum * running + (1 - momentum) * batch``.
    Eval mode uses the running stats; eval before any train step is legal
    and normalizes with the initial (0, 1) statistics.
    """
    if x.data.ndim != 4:
        raise ContractViolation(f"batchnorm2d input must be rank 4, got shape {x.data.shape}")
    ch = x.data.shape[1]
    if gamma.data.shape != (ch,) or beta.data.shape != (ch,):
        raise ContractViolation(
            f"batchnorm2d scale/shift shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match {ch} channels")

    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean *= momentum
        state.running_mean += (1.0 - momentum) * mean
        state.running_var *= momentum
        state.running_var += (1.0 - momentum) * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def grad_fn(g):
            dxhat = g * gamma.data[None, :, None, None]
            sum_dxhat = dxhat.sum(axis=(0, 2, 3))
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
            gx = (inv_std[None, :, None, None] / m) * (
                m * dxhat
                - sum_dxhat[None, :, None, None]
                - xhat * sum_dxhat_xhat[None, :, None, None])
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            return gx.astype(x.data.dtype, copy=False), ggamma, gbeta

        return _node(out.astype(x.data.dtype, copy=False), (x, gamma, beta), grad_fn)

    inv_std = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (x.data - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def grad_fn(g):
        gx = g * (gamma.data * inv_std)[None, :, None, None]
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        return gx.astype(x.data.dtype, copy=False), ggamma, gbeta

    return _node(out.astype(x.data.dtype, copy=False), (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable named leaf.

    The recording is single-use: a second call on the same loss node
    without a fresh forward raises.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._spent:
        raise ContractViolation("backward already ran on this recording; rerun forward first")
    loss._spent = True
    if not loss.requires_grad:
        return

    # count consumer edges so each node propagates exactly once
    pending: dict[int, int] = {}
    nodes: dict[int, Tensor] = {id(loss): loss}
    stack = [loss]
    while stack:
        t = stack.pop()
        for parent in t._parents:
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key not in nodes:
                nodes[key] = parent
                stack.append(parent)
            pending[key] = pending.get(key, 0) + 1

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    ready = [loss]
    while ready:
        t = ready.pop()
        g = grads.pop(id(t), None)
        if g is None:
            g = np.zeros_like(t.data)
        if t._grad_fn is None:
            if t.grad is not None:
                t.grad += g.astype(t.data.dtype, copy=False)
        else:
            for parent, pg in zip(t._parents, t._grad_fn(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if pg is not None:
                    acc = grads.get(key)
                    if acc is None:
                        grads[key] = pg
                    else:
                        acc += pg
                pending[key] -= 1
                if pending[key] == 0:
                    ready.append(nodes[key])


def zero_grads(params) -> None:
    """Reset the grad buffer of every parameter to zero."""
    for p in params:
        if p.grad is None:
            raise ContractViolation(f"tensor {p!r} has no grad buffer")
        p.grad[...] = 0


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"R2AU"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, config_text: str, arrays: dict[str, np.ndarray]) -> None:
    """Write the little-endian checkpoint container.

    Layout: magic ``R2AU``, u32 format version, length-prefixed canonical
    config text, u32 record count, then per-array records of
    (u32 name length, name, u32 rank, u32 extents..., float32 payload).
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        config_bytes = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            if arr.dtype != np.float32:
                raise ValueError(f"checkpoint arrays must be float32, {name!r} is {arr.dtype}")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    """Read a container written by `save_checkpoint`; bit-exact payloads."""
    with open(path, "rb") as fh:
        blob = fh.read()

    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise ValueError(f"truncated checkpoint: wanted {n} bytes at offset {offset}")
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config_len, = struct.unpack("<I", take(4))
    config_text = take(config_len).decode("utf-8")
    count, = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        rank, = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_items = math.prod(shape) if shape else 1
        payload = take(4 * n_items)
        arrays[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if offset != len(blob):
        raise ValueError(f"trailing bytes in checkpoint ({len(blob) - offset})")
    return config_text, arrays
