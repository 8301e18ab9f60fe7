"""Segment-sampled clip scoring with learnable temporal interaction.

Each sampled frame runs through a small convolutional backbone; before
selected stages, a pair of per-channel weights mixes every frame with its
successor (the last frame has no successor and keeps only its own term).
The blocks start as the identity (own weight 1, successor weight 0), so
inserting them leaves a pretrained network's outputs bit-unchanged, and
training can grow temporal interactions from there. Per-frame scores are
averaged into a clip-level consensus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ShapeError, ValidationError
from .heads import LabelSpace, ScoreTriple, StructuredHeadParams, structured_forward
from .init import uniform_fan_in, zeros_param
from .ops import avg_pool2x2, concat, conv2d, mean_along, narrow, reshape, spatial_avg_pool
from .tensor import Tensor, add, hadamard, relu


@dataclass
class HfBlockParams:
    """Per-channel weights for a frame and its successor."""

    w0: Tensor  # (C,) weight of the frame itself
    w1: Tensor  # (C,) weight of the next frame

    @classmethod
    def create(cls, channels: int) -> "HfBlockParams":
        return cls(
            w0=Tensor(np.ones(channels), grad_enabled=True),
            w1=Tensor(np.zeros(channels), grad_enabled=True),
        )

    def as_dict(self, prefix: str) -> dict:
        return {f"{prefix}.w0": self.w0, f"{prefix}.w1": self.w1}

    @classmethod
    def from_dict(cls, prefix: str, params: dict) -> "HfBlockParams":
        return cls(params[f"{prefix}.w0"], params[f"{prefix}.w1"])


def hf_block(features: Tensor, params: HfBlockParams) -> Tensor:
    """Mix frames (..., T, C, H, W) with their temporal successors.

    G_t = w0 * F_t + w1 * F_{t+1}; the final frame uses only its own term.
    """
    squeeze = features.ndim == 4
    f = reshape(features, (1,) + features.shape) if squeeze else features
    if f.ndim < 5:
        raise ShapeError(f"expected at least (T, C, H, W), got {features.shape}")
    t_len, c = f.shape[-4], f.shape[-3]
    if params.w0.shape != (c,):
        raise ShapeError(f"block weights sized {params.w0.shape} for {c} channels")
    w0 = reshape(params.w0, (c, 1, 1))
    w1 = reshape(params.w1, (c, 1, 1))
    own = hadamard(f, w0)
    if t_len > 1:
        succ = concat([narrow(f, -4, 1, t_len - 1),
                       Tensor(np.zeros(f.shape[:-4] + (1,) + f.shape[-3:]))], -4)
        out = add(own, hadamard(succ, w1))
    else:
        out = own
    return reshape(out, out.shape[1:]) if squeeze else out


@dataclass
class BackboneParams:
    """Stack of same-padded 3x3 conv+relu stages with 2x2 mean pools between."""

    kernels: list
    biases: list

    @property
    def num_stages(self) -> int:
        return len(self.kernels)

    @property
    def feature_dim(self) -> int:
        return self.kernels[-1].shape[0]

    @classmethod
    def create(cls, in_channels: int, stage_channels, seed: int,
               name: str = "backbone", kernel_size: int = 3) -> "BackboneParams":
        kernels, biases = [], []
        cin = in_channels
        for s, cout in enumerate(stage_channels):
            fan = cin * kernel_size * kernel_size
            kernels.append(uniform_fan_in((cout, cin, kernel_size, kernel_size), fan,
                                          seed, f"{name}.stage{s}.kernel"))
            biases.append(zeros_param((cout,)))
            cin = cout
        return cls(kernels=kernels, biases=biases)

    def as_dict(self, prefix: str) -> dict:
        out = {}
        for s, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"{prefix}.stage{s}.kernel"] = k
            out[f"{prefix}.stage{s}.bias"] = b
        return out

    @classmethod
    def from_dict(cls, prefix: str, params: dict) -> "BackboneParams":
        kernels, biases = [], []
        s = 0
        while f"{prefix}.stage{s}.kernel" in params:
            kernels.append(params[f"{prefix}.stage{s}.kernel"])
            biases.append(params[f"{prefix}.stage{s}.bias"])
            s += 1
        if not kernels:
            raise ValidationError(f"no backbone stages under prefix '{prefix}'")
        return cls(kernels=kernels, biases=biases)


def backbone_forward(
    frames: Tensor,
    params: BackboneParams,
    hf: Optional[Dict[int, HfBlockParams]] = None,
) -> Tensor:
    """Run frames (..., T, C, H, W) through the stage stack.

    Temporal-interaction blocks, when given, sit at the input of their
    stage (after the preceding pool). Frames keep their time axis so the
    blocks can mix along it.
    """
    if frames.ndim < 4:
        raise ShapeError(f"expected at least (T, C, H, W), got {frames.shape}")
    if hf:
        bad = [s for s in hf if not 0 <= s < params.num_stages]
        if bad:
            raise ValidationError(f"interaction positions {bad} outside {params.num_stages} stages")
    x = frames
    for s, (k, b) in enumerate(zip(params.kernels, params.biases)):
        if s > 0:
            x = avg_pool2x2(x)
        if hf and s in hf:
            x = hf_block(x, hf[s])
        x = relu(add(conv2d(x, k), reshape(b, (k.shape[0], 1, 1))))
    return x


@dataclass(frozen=True)
class HfTsnConfig:
    """Clip layout: segment count, stage widths, and block positions."""

    segments: int
    stages: tuple
    hf_positions: tuple = field(default=())

    def __post_init__(self):
        if self.segments < 1:
            raise ValidationError(f"segments must be positive, got {self.segments}")
        if not self.stages or any(c < 1 for c in self.stages):
            raise ValidationError(f"stage widths must be positive, got {self.stages}")
        if len(set(self.hf_positions)) != len(self.hf_positions):
            raise ValidationError(f"duplicate interaction positions {self.hf_positions}")
        for p in self.hf_positions:
            if not 0 <= p < len(self.stages):
                raise ValidationError(
                    f"interaction position {p} outside {len(self.stages)} stages")

    def to_json(self) -> str:
        return json.dumps({
            "segments": self.segments,
            "stages": list(self.stages),
            "hf_positions": list(self.hf_positions),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "HfTsnConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config: invalid JSON ({exc})") from exc
        for key in ("segments", "stages", "hf_positions"):
            if key not in payload:
                raise ValidationError(f"config: missing key '{key}'")
        return cls(segments=int(payload["segments"]),
                   stages=tuple(int(c) for c in payload["stages"]),
                   hf_positions=tuple(int(p) for p in payload["hf_positions"]))


def consensus(segment_scores: Tensor) -> Tensor:
    """Average per-segment scores (T, K) or (B, T, K) over the time axis."""
    if segment_scores.ndim == 2:
        return mean_along(segment_scores, 0)
    if segment_scores.ndim == 3:
        return mean_along(segment_scores, 1)
    raise ShapeError(f"expected (T, K) or (B, T, K), got {segment_scores.shape}")


def hf_tsn_forward(
    frames: Tensor,
    config: HfTsnConfig,
    backbone: BackboneParams,
    hf_params: Dict[int, HfBlockParams],
    head: StructuredHeadParams,
    space: LabelSpace,
    train: bool = False,
    rng=None,
    dropout_p: float = 0.0,
) -> ScoreTriple:
    """Score a clip (T, C, H, W) or batch (B, T, C, H, W) of sampled segments."""
    squeeze = frames.ndim == 4
    fr = reshape(frames, (1,) + frames.shape) if squeeze else frames
    if fr.ndim != 5:
        raise ShapeError(f"expected (T, C, H, W) or (B, T, C, H, W), got {frames.shape}")
    b, t_len = fr.shape[:2]
    if t_len != config.segments:
        raise ShapeError(f"clip has {t_len} segments, config expects {config.segments}")
    feats = backbone_forward(fr, backbone, hf=hf_params)
    pooled = spatial_avg_pool(feats)  # (B, T, F)
    flat = reshape(pooled, (b * t_len, pooled.shape[-1]))
    per_seg = structured_forward(flat, head, space, train=train, rng=rng, dropout_p=dropout_p)
    out = []
    for logits in (per_seg.verb, per_seg.noun, per_seg.action):
        clip = consensus(reshape(logits, (b, t_len, logits.shape[-1])))
        out.append(reshape(clip, (clip.shape[1],)) if squeeze else clip)
    return ScoreTriple(*out)
