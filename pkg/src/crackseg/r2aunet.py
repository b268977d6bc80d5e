"""Encoder-decoder assembly: recurrent-residual conv blocks on every level,
additive attention gates on the skips, nearest-upsample decoding, and a
1x1 sigmoid head. Ablation flags recover the plain U-Net, the
recurrent-residual variant, and the attention-only variant.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .backend import ContractViolation, Tensor


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults follow U-Net convention.

    ``time_steps=0`` and ``recurrence_enabled=False`` are equivalent at
    forward time; the flag additionally removes the recurrent kernels from
    the parameter set so the ablated layouts match the classic networks.
    """

    depth: int = 4
    base_channels: int = 64
    time_steps: int = 2
    attention_enabled: bool = True
    recurrence_enabled: bool = True
    residual_enabled: bool = True
    attn_inter_ratio: int = 2
    in_channels: int = 3
    out_channels: int = 1

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.time_steps < 0:
            raise ValueError(f"time_steps must be >= 0, got {self.time_steps}")
        if self.attn_inter_ratio < 1:
            raise ValueError(f"attn_inter_ratio must be >= 1, got {self.attn_inter_ratio}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels != 1:
            raise ValueError("the binary sigmoid head is single-channel")

    def canonical(self) -> str:
        """Stable one-line text form, embedded in checkpoints."""
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def from_canonical(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale configuration used throughout the test suite."""
        return cls(**{"depth": 2, "base_channels": 8, **overrides})


class _Registry:
    """Creation-ordered parameter/buffer store with seeded init.

    Conv weights use Kaiming-uniform fan-in (limit sqrt(6/fan_in)), biases
    start at zero, norm scale/shift at one/zero. Init order is the layer
    declaration order, so a seed pins every weight.
    """

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def conv(self, name: str, cout: int, cin: int, k: int) -> Tensor:
        fan_in = cin * k * k
        limit = math.sqrt(6.0 / fan_in)
        data = self.rng.uniform(-limit, limit, size=(cout, cin, k, k)).astype(np.float32)
        return self._add(name, data)

    def zeros(self, name: str, shape) -> Tensor:
        return self._add(name, np.zeros(shape, np.float32))

    def ones(self, name: str, shape) -> Tensor:
        return self._add(name, np.ones(shape, np.float32))

    def buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        if name in self.buffers or name in self.params:
            raise ValueError(f"duplicate buffer name {name!r}")
        self.buffers[name] = data
        return data

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = backend.param(data, name)
        self.params[name] = t
        return t


class _BatchNorm:
    """Shared scale/shift with one running-stat set per unroll step.

    The per-step feature distributions of a recurrent unit differ, so each
    step keeps its own running mean/var; step 0 carries the plain
    (unsuffixed) buffer names used by the non-recurrent layouts.
    """

    def __init__(self, reg: _Registry, name: str, channels: int, steps: int = 0):
        self.gamma = reg.ones(f"{name}.gamma", (channels,))
        self.beta = reg.zeros(f"{name}.beta", (channels,))
        self.states = []
        for t in range(steps + 1):
            suffix = "" if t == 0 else f".t{t}"
            self.states.append(backend.BatchNormState(
                reg.buffer(f"{name}{suffix}.running_mean", np.zeros(channels, np.float32)),
                reg.buffer(f"{name}{suffix}.running_var", np.ones(channels, np.float32)),
            ))

    def __call__(self, x: Tensor, training: bool, step: int = 0) -> Tensor:
        return backend.batchnorm2d(x, self.gamma, self.beta, self.states[step], training)


class RecurrentConvUnit:
    """One conv unit unrolled over discrete time steps.

    The feed-forward 3x3 conv (which carries the unit bias) sees the block
    input at every step; the recurrent 3x3 conv sees the previous step's
    output. Each step is activated then normalized:

        h(0) = norm(relu(conv_ff(x)))
        h(t) = norm(relu(conv_ff(x) + conv_r(h(t-1)))),  t = 1..T

    With zero recurrent weights every step reproduces h(0). The norm scale
    and shift are shared across steps; running statistics are kept per
    step, since the step distributions differ.
    """

    def __init__(self, reg: _Registry, name: str, cin: int, cout: int, recurrent: bool,
                 max_steps: int = 0):
        self.w_ff = reg.conv(f"{name}.ff.weight", cout, cin, 3)
        self.b_ff = reg.zeros(f"{name}.ff.bias", (cout,))
        self.w_rec = reg.conv(f"{name}.rec.weight", cout, cout, 3) if recurrent else None
        self.max_steps = max_steps if recurrent else 0
        self.bn = _BatchNorm(reg, f"{name}.bn", cout, self.max_steps)

    def forward(self, x: Tensor, steps: int, training: bool) -> Tensor:
        if steps > self.max_steps:
            raise ContractViolation(
                f"unit was built for at most {self.max_steps} time steps, got {steps}")
        ff = backend.conv2d(x, self.w_ff, self.b_ff)
        h = self.bn(backend.relu(ff), training, step=0)
        if self.w_rec is not None:
            for t in range(1, steps + 1):
                rec = backend.conv2d(h, self.w_rec)
                h = self.bn(backend.relu(backend.add(ff, rec)), training, step=t)
        return h


def rcl_forward(x: Tensor, unit: RecurrentConvUnit, steps: int, training: bool = True) -> Tensor:
    """Run one recurrent conv unit for the given number of time steps."""
    if steps < 0:
        raise ValueError(f"time steps must be >= 0, got {steps}")
    return unit.forward(x, steps, training)


class R2CLBlock:
    """Two stacked recurrent conv units wrapped in a residual addition.

    The shortcut is the identity when the channel width is unchanged and a
    1x1 projection otherwise; disabling the residual flag leaves only the
    stacked path (the classic double-conv block when recurrence is also off).
    """

    def __init__(self, reg: _Registry, name: str, cin: int, cout: int, cfg: ModelConfig):
        rec = cfg.recurrence_enabled
        self.steps = cfg.time_steps if rec else 0
        self.u1 = RecurrentConvUnit(reg, f"{name}.u1", cin, cout, rec, self.steps)
        self.u2 = RecurrentConvUnit(reg, f"{name}.u2", cout, cout, rec, self.steps)
        self.residual = cfg.residual_enabled
        self.proj_w = self.proj_b = None
        if self.residual and cin != cout:
            self.proj_w = reg.conv(f"{name}.proj.weight", cout, cin, 1)
            self.proj_b = reg.zeros(f"{name}.proj.bias", (cout,))

    def forward(self, x: Tensor, training: bool) -> Tensor:
        y = self.u2.forward(self.u1.forward(x, self.steps, training), self.steps, training)
        if not self.residual:
            return y
        shortcut = x if self.proj_w is None else backend.conv2d(x, self.proj_w, self.proj_b)
        return backend.add(shortcut, y)


def r2cl_block(x: Tensor, block: R2CLBlock, training: bool = True) -> Tensor:
    return block.forward(x, training)


class AttentionGate:
    """Additive attention on a skip connection.

    The coarser gating signal is upsampled to the skip's resolution, both
    inputs pass through 1x1 projections, and a final 1x1 conv plus sigmoid
    yields a single-channel coefficient map multiplied into the skip.
    """

    def __init__(self, reg: _Registry, name: str, f_l: int, f_g: int, f_int: int):
        self.w_x = reg.conv(f"{name}.wx.weight", f_int, f_l, 1)
        self.w_g = reg.conv(f"{name}.wg.weight", f_int, f_g, 1)
        self.b_g = reg.zeros(f"{name}.wg.bias", (f_int,))
        self.w_psi = reg.conv(f"{name}.psi.weight", 1, f_int, 1)
        self.b_psi = reg.zeros(f"{name}.psi.bias", (1,))

    def coefficients(self, x_skip: Tensor, g: Tensor) -> Tensor:
        if 2 * g.shape[2] != x_skip.shape[2] or 2 * g.shape[3] != x_skip.shape[3]:
            raise ContractViolation(
                f"gating signal {g.shape} must have half the skip's extents {x_skip.shape}")
        g_up = backend.upsample2(g)
        hidden = backend.relu(backend.add(
            backend.conv2d(x_skip, self.w_x),
            backend.conv2d(g_up, self.w_g, self.b_g)))
        return backend.sigmoid(backend.conv2d(hidden, self.w_psi, self.b_psi))

    def forward(self, x_skip: Tensor, g: Tensor) -> Tensor:
        return backend.mul(x_skip, self.coefficients(x_skip, g))


def attention_gate(x_skip: Tensor, g: Tensor, gate: AttentionGate) -> Tensor:
    return gate.forward(x_skip, g)


class _UpConv:
    """Nearest-neighbor upsample followed by a 3x3 conv, relu, norm."""

    def __init__(self, reg: _Registry, name: str, cin: int, cout: int):
        self.w = reg.conv(f"{name}.conv.weight", cout, cin, 3)
        self.b = reg.zeros(f"{name}.conv.bias", (cout,))
        self.bn = _BatchNorm(reg, f"{name}.bn", cout)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return self.bn(backend.relu(backend.conv2d(backend.upsample2(x), self.w, self.b)),
                       training)


class Model:
    """The assembled network plus its named parameters and buffers.

    Channel widths follow base_channels * 2^k down the encoder; the decoder
    mirrors them. Layer name prefixes, in creation order: enc1..encD, mid,
    then per decoder level upK / attK / decK from the deepest level, and the
    1x1 sigmoid head.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = dataclasses.replace(cfg)
        reg = _Registry(seed)
        widths = [cfg.base_channels * (2 ** k) for k in range(cfg.depth + 1)]

        self.enc: list[R2CLBlock] = []
        cin = cfg.in_channels
        for level, width in enumerate(widths[:-1], start=1):
            self.enc.append(R2CLBlock(reg, f"enc{level}", cin, width, cfg))
            cin = width
        self.mid = R2CLBlock(reg, "mid", widths[-2], widths[-1], cfg)

        self.up: list[_UpConv] = []
        self.att: list[AttentionGate | None] = []
        self.dec: list[R2CLBlock] = []
        for level in range(cfg.depth, 0, -1):
            w_skip, w_deep = widths[level - 1], widths[level]
            self.up.append(_UpConv(reg, f"up{level}", w_deep, w_skip))
            if cfg.attention_enabled:
                f_int = max(1, w_skip // cfg.attn_inter_ratio)
                self.att.append(AttentionGate(reg, f"att{level}", w_skip, w_deep, f_int))
            else:
                self.att.append(None)
            self.dec.append(R2CLBlock(reg, f"dec{level}", 2 * w_skip, w_skip, cfg))

        self.head_w = reg.conv("head.weight", cfg.out_channels, widths[0], 1)
        self.head_b = reg.zeros("head.bias", (cfg.out_channels,))

        self.params = reg.params
        self.buffers = reg.buffers

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if x.data.ndim != 4:
            raise ContractViolation(f"input must be rank 4 NCHW, got shape {x.shape}")
        if x.shape[1] != self.cfg.in_channels:
            raise ContractViolation(
                f"input has {x.shape[1]} channels, model expects {self.cfg.in_channels}")
        divisor = 2 ** self.cfg.depth
        if x.shape[2] % divisor or x.shape[3] % divisor:
            raise ContractViolation(
                f"spatial extents {x.shape[2]}x{x.shape[3]} must be divisible by {divisor}")

        skips = []
        h = x
        for block in self.enc:
            h = block.forward(h, training)
            skips.append(h)
            h = backend.maxpool2(h)
        h = self.mid.forward(h, training)
        for up, att, dec, skip in zip(self.up, self.att, self.dec, reversed(skips)):
            gating = h
            d = up.forward(h, training)
            s = att.forward(skip, gating) if att is not None else skip
            h = dec.forward(backend.concat_channels(s, d), training)
        return backend.sigmoid(backend.conv2d(h, self.head_w, self.head_b))

    def zero_grads(self) -> None:
        backend.zero_grads(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- weight snapshots (best-epoch checkpointing, save/load) ------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: t.data for name, t in self.params.items()}
        arrays.update(self.buffers)
        return arrays

    def copy_weights(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.state_arrays().items()}

    def set_weights(self, snapshot: dict[str, np.ndarray]) -> None:
        current = self.state_arrays()
        missing = sorted(set(current) - set(snapshot))
        extra = sorted(set(snapshot) - set(current))
        if missing or extra:
            raise ValueError(f"weight snapshot mismatch: missing {missing}, extra {extra}")
        for name, arr in current.items():
            src = snapshot[name]
            if src.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {src.shape} vs {arr.shape}")
            arr[...] = src


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


def save_model(path, model: Model) -> None:
    backend.save_checkpoint(path, model.cfg.canonical(), model.state_arrays())


def load_model(path) -> Model:
    config_text, arrays = backend.load_checkpoint(path)
    model = Model(ModelConfig.from_canonical(config_text), seed=0)
    model.set_weights(arrays)
    return model


def predict(model: Model, images, batch_size: int = 8) -> list[np.ndarray]:
    """Eval-mode soft masks, one (H, W) float32 array in [0, 1] per image.

    Accepts a list of (H, W, 3) arrays or one (N, H, W, 3) stack of RGB
    values already normalized to [0, 1].
    """
    stack = np.asarray(images, dtype=np.float32)
    if stack.ndim == 3:
        stack = stack[None]
    if stack.ndim != 4 or stack.shape[-1] != model.cfg.in_channels:
        raise ContractViolation(
            f"predict expects (N, H, W, {model.cfg.in_channels}) images, got {stack.shape}")
    nchw = np.ascontiguousarray(stack.transpose(0, 3, 1, 2))
    masks: list[np.ndarray] = []
    for start in range(0, nchw.shape[0], batch_size):
        out = model.forward(Tensor(nchw[start:start + batch_size]), training=False)
        masks.extend(out.data[:, 0])
    return masks
