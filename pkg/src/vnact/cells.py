"""Recurrent video cells.

The attentive cell keeps a convolutional memory (D, H, W) and, at each
step, re-weights its input with a spatial attention map computed from the
input and previous hidden state before the usual four-gate update. Gate
pre-activations can additionally be biased by externally supplied maps,
which is how the two-stream coupling injects one modality into the other.
Gate layout along the channel axis is (input, forget, candidate, output).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError
from .init import uniform_fan_in, zeros_param
from .ops import (
    affine,
    concat,
    conv2d,
    index_select,
    narrow,
    reshape,
    softmax_spatial,
    spatial_avg_pool,
)
from .tensor import Tensor, add, hadamard, sigmoid, subtract, tanh


@dataclass
class GateBias:
    """Per-gate additive pre-activation maps, one per gate."""

    i: Tensor
    f: Tensor
    g: Tensor
    o: Tensor

    @classmethod
    def from_stacked(cls, stacked: Tensor, memory: int) -> "GateBias":
        if stacked.shape[-3] != 4 * memory:
            raise ShapeError(
                f"stacked gate bias has {stacked.shape[-3]} channels, expected {4 * memory}")
        parts = [narrow(stacked, -3, k * memory, memory) for k in range(4)]
        return cls(*parts)


def _split_gates(z: Tensor, memory: int):
    if z.shape[-3] != 4 * memory:
        raise ShapeError(f"gate stack has {z.shape[-3]} channels, expected {4 * memory}")
    return tuple(narrow(z, -3, k * memory, memory) for k in range(4))


def _forget_one_bias(memory: int) -> Tensor:
    """Zero gate bias with the forget slice at +1, so memories persist early."""
    b = np.zeros(4 * memory)
    b[memory:2 * memory] = 1.0
    return Tensor(b, grad_enabled=True)


@dataclass
class LstaState:
    """Cell memory and hidden map, both (..., D, H, W)."""

    c: Tensor
    h: Tensor

    def __post_init__(self):
        if self.c.shape != self.h.shape:
            raise ShapeError(f"state shapes differ: c {self.c.shape} vs h {self.h.shape}")

    @classmethod
    def zeros(cls, shape: tuple) -> "LstaState":
        return cls(c=Tensor(np.zeros(shape)), h=Tensor(np.zeros(shape)))


@dataclass
class LstaParams:
    attn_kernel: Tensor  # (1, C+D, k, k)
    gate_kernel: Tensor  # (4D, C+D, k, k)
    gate_bias: Tensor  # (4D,)
    pool_kernel: Tensor  # (D, D, 1, 1) output-path mixing of the memory

    @property
    def memory(self) -> int:
        return self.pool_kernel.shape[0]

    @classmethod
    def create(cls, input_channels: int, memory: int, seed: int,
               name: str = "lsta", kernel_size: int = 3) -> "LstaParams":
        cin = input_channels + memory
        fan = cin * kernel_size * kernel_size
        return cls(
            attn_kernel=uniform_fan_in((1, cin, kernel_size, kernel_size), fan, seed, f"{name}.attn_kernel"),
            gate_kernel=uniform_fan_in((4 * memory, cin, kernel_size, kernel_size), fan, seed, f"{name}.gate_kernel"),
            gate_bias=_forget_one_bias(memory),
            pool_kernel=uniform_fan_in((memory, memory, 1, 1), memory, seed, f"{name}.pool_kernel"),
        )

    def as_dict(self, prefix: str) -> dict:
        return {
            f"{prefix}.attn_kernel": self.attn_kernel,
            f"{prefix}.gate_kernel": self.gate_kernel,
            f"{prefix}.gate_bias": self.gate_bias,
            f"{prefix}.pool_kernel": self.pool_kernel,
        }

    @classmethod
    def from_dict(cls, prefix: str, params: dict) -> "LstaParams":
        return cls(*(params[f"{prefix}.{f}"] for f in (
            "attn_kernel", "gate_kernel", "gate_bias", "pool_kernel")))


def lsta_step(
    x: Tensor,
    state: LstaState,
    params: LstaParams,
    bias: Optional[GateBias] = None,
):
    """One attentive recurrence step on x (..., C, H, W).

    Returns the next state and the attention map that re-weighted the
    input. The hidden output passes the memory through a 1x1 mixing
    convolution before the output gate, so h and c can decouple.
    """
    d = params.memory
    alpha = softmax_spatial(conv2d(concat([x, state.h], -3), params.attn_kernel))
    x_att = hadamard(x, alpha)
    z = conv2d(concat([x_att, state.h], -3), params.gate_kernel)
    z = add(z, reshape(params.gate_bias, (4 * d, 1, 1)))
    zi, zf, zg, zo = _split_gates(z, d)
    if bias is not None:
        zi, zf, zg, zo = add(zi, bias.i), add(zf, bias.f), add(zg, bias.g), add(zo, bias.o)
    i, f, g, o = sigmoid(zi), sigmoid(zf), tanh(zg), sigmoid(zo)
    c = add(hadamard(f, state.c), hadamard(i, g))
    h = hadamard(o, tanh(conv2d(c, params.pool_kernel)))
    return LstaState(c=c, h=h), alpha


@dataclass
class ConvLstmParams:
    gate_kernel: Tensor  # (4D, C+D, k, k)
    gate_bias: Tensor  # (4D,)

    @property
    def memory(self) -> int:
        return self.gate_kernel.shape[0] // 4

    @classmethod
    def create(cls, input_channels: int, memory: int, seed: int,
               name: str = "convlstm", kernel_size: int = 3) -> "ConvLstmParams":
        cin = input_channels + memory
        fan = cin * kernel_size * kernel_size
        return cls(
            gate_kernel=uniform_fan_in((4 * memory, cin, kernel_size, kernel_size), fan, seed, f"{name}.gate_kernel"),
            gate_bias=_forget_one_bias(memory),
        )

    def as_dict(self, prefix: str) -> dict:
        return {f"{prefix}.gate_kernel": self.gate_kernel, f"{prefix}.gate_bias": self.gate_bias}

    @classmethod
    def from_dict(cls, prefix: str, params: dict) -> "ConvLstmParams":
        return cls(params[f"{prefix}.gate_kernel"], params[f"{prefix}.gate_bias"])


def convlstm_step(
    x: Tensor,
    state: LstaState,
    params: ConvLstmParams,
    bias: Optional[GateBias] = None,
) -> LstaState:
    """One convolutional LSTM step: the plain four-gate update, no attention."""
    d = params.memory
    z = conv2d(concat([x, state.h], -3), params.gate_kernel)
    z = add(z, reshape(params.gate_bias, (4 * d, 1, 1)))
    zi, zf, zg, zo = _split_gates(z, d)
    if bias is not None:
        zi, zf, zg, zo = add(zi, bias.i), add(zf, bias.f), add(zg, bias.g), add(zo, bias.o)
    i, f, g, o = sigmoid(zi), sigmoid(zf), tanh(zg), sigmoid(zo)
    c = add(hadamard(f, state.c), hadamard(i, g))
    return LstaState(c=c, h=hadamard(o, tanh(c)))


@dataclass
class GruParams:
    w_update: Tensor  # (C+D, D)
    b_update: Tensor
    w_reset: Tensor
    b_reset: Tensor
    w_cand: Tensor
    b_cand: Tensor

    @property
    def hidden(self) -> int:
        return self.w_update.shape[1]

    @classmethod
    def create(cls, input_dim: int, hidden: int, seed: int, name: str = "gru") -> "GruParams":
        cin = input_dim + hidden
        return cls(
            w_update=uniform_fan_in((cin, hidden), cin, seed, f"{name}.w_update"),
            b_update=zeros_param((hidden,)),
            w_reset=uniform_fan_in((cin, hidden), cin, seed, f"{name}.w_reset"),
            b_reset=zeros_param((hidden,)),
            w_cand=uniform_fan_in((cin, hidden), cin, seed, f"{name}.w_cand"),
            b_cand=zeros_param((hidden,)),
        )

    def as_dict(self, prefix: str) -> dict:
        return {
            f"{prefix}.w_update": self.w_update,
            f"{prefix}.b_update": self.b_update,
            f"{prefix}.w_reset": self.w_reset,
            f"{prefix}.b_reset": self.b_reset,
            f"{prefix}.w_cand": self.w_cand,
            f"{prefix}.b_cand": self.b_cand,
        }

    @classmethod
    def from_dict(cls, prefix: str, params: dict) -> "GruParams":
        return cls(*(params[f"{prefix}.{f}"] for f in (
            "w_update", "b_update", "w_reset", "b_reset", "w_cand", "b_cand")))


def gru_step(x: Tensor, h: Tensor, params: GruParams) -> Tensor:
    """One gated-recurrence step on x (C,) or (B, C) with state h (D,) / (B, D)."""
    squeeze = x.ndim == 1
    if squeeze:
        x, h = reshape(x, (1, -1)), reshape(h, (1, -1))
    if x.ndim != 2 or h.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_step expects matching batches, got {x.shape} and {h.shape}")
    xh = concat([x, h], 1)
    z = sigmoid(affine(xh, params.w_update, params.b_update))
    r = sigmoid(affine(xh, params.w_reset, params.b_reset))
    n = tanh(affine(concat([x, hadamard(r, h)], 1), params.w_cand, params.b_cand))
    ones = Tensor(np.ones(z.shape))
    out = add(hadamard(subtract(ones, z), n), hadamard(z, h))
    return reshape(out, (out.shape[1],)) if squeeze else out


def run_lsta_gru(
    frames: Tensor,
    lsta: LstaParams,
    gru_a: GruParams,
    gru_b: GruParams,
):
    """Roll the attentive cell over frames (T, C, H, W) or (B, T, C, H, W),
    feeding the pooled hidden map of every step to two independent
    gated-recurrence aggregators.

    Returns (attentive descriptor, aggregator descriptor): the pooled final
    memory, and the concatenated final states of the two aggregators.
    """
    squeeze = frames.ndim == 4
    fr = reshape(frames, (1,) + frames.shape) if squeeze else frames
    if fr.ndim != 5:
        raise ShapeError(f"expected (T, C, H, W) or (B, T, C, H, W), got {frames.shape}")
    b, t_len, _, h_ext, w_ext = fr.shape
    if t_len == 0:
        raise ShapeError("empty frame sequence")
    d = lsta.memory
    state = LstaState.zeros((b, d, h_ext, w_ext))
    ha = Tensor(np.zeros((b, gru_a.hidden)))
    hb = Tensor(np.zeros((b, gru_b.hidden)))
    for t in range(t_len):
        state, _ = lsta_step(index_select(fr, 1, t), state, lsta)
        pooled = spatial_avg_pool(state.h)
        ha = gru_step(pooled, ha, gru_a)
        hb = gru_step(pooled, hb, gru_b)
    lsta_desc = spatial_avg_pool(state.c)
    gru_desc = concat([ha, hb], 1)
    if squeeze:
        lsta_desc = reshape(lsta_desc, (lsta_desc.shape[1],))
        gru_desc = reshape(gru_desc, (gru_desc.shape[1],))
    return lsta_desc, gru_desc
