"""Cross-modal coupling of an appearance stream and a motion stream.

The appearance stream runs the attentive cell on frame features; the
motion stream runs a plain convolutional LSTM on stacked-displacement
features sharpened by a spatial attention map. During joint rollout each
stream biases the other's gate pre-activations: a 3D convolution over the
time-stacked appearance features produces per-step biases for the motion
cell, and a 2D convolution of each motion frame biases the attentive
cell. Zero fusion kernels therefore reproduce the uncoupled streams
bit-for-bit, which is the fine-tuning starting point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import ConvLstmParams, GateBias, LstaParams, LstaState, convlstm_step, lsta_step
from .errors import ShapeError
from .heads import ScoreTriple
from .ops import conv2d, conv3d, index_select, reshape, softmax_spatial_scaled, spatial_avg_pool, transpose
from .tensor import Tensor, add, hadamard, scale


@dataclass(frozen=True)
class FlowStack:
    """A block of L consecutive displacement fields stacked channel-wise.

    Layout is (2L, H, W): x- and y-components interleaved per field, so
    channel 2k is the x-component of field k and 2k+1 its y-component.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] % 2:
            raise ShapeError(f"flow stack must be (2L, H, W), got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def length(self) -> int:
        return self.data.shape[0] // 2

    @classmethod
    def from_xy(cls, x_fields: np.ndarray, y_fields: np.ndarray) -> "FlowStack":
        x_fields = np.asarray(x_fields, dtype=np.float64)
        y_fields = np.asarray(y_fields, dtype=np.float64)
        if x_fields.shape != y_fields.shape or x_fields.ndim != 3:
            raise ShapeError(
                f"component stacks must share (L, H, W), got {x_fields.shape} and {y_fields.shape}")
        stacked = np.empty((2 * x_fields.shape[0],) + x_fields.shape[1:])
        stacked[0::2] = x_fields
        stacked[1::2] = y_fields
        return cls(stacked)


def inflate_first_conv(kernel, target_in: int) -> Tensor:
    """Widen a first-layer kernel (C_out, 3, kH, kW) to ``target_in`` input
    channels by replicating the mean over its three source channels.

    Every inflated slice equals that mean exactly; no rescaling is applied,
    so a constant-over-channels input produces target_in/3 times the
    original response.
    """
    arr = kernel.data if isinstance(kernel, Tensor) else np.asarray(kernel, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"expected a (C_out, 3, kH, kW) kernel, got {arr.shape}")
    if target_in < 1:
        raise ShapeError(f"target channel count must be positive, got {target_in}")
    mean = arr.mean(axis=1, keepdims=True)
    return Tensor(np.repeat(mean, target_in, axis=1), grad_enabled=True)


@dataclass
class MotionAttentionParams:
    """1x1 map from motion features to a single spatial attention plane."""

    kernel: Tensor  # (1, C, 1, 1)

    @classmethod
    def create(cls, channels: int) -> "MotionAttentionParams":
        # Zero start: uniform attention, so the module begins as identity.
        return cls(kernel=Tensor(np.zeros((1, channels, 1, 1)), grad_enabled=True))

    def as_dict(self, prefix: str) -> dict:
        return {f"{prefix}.kernel": self.kernel}

    @classmethod
    def from_dict(cls, prefix: str, params: dict) -> "MotionAttentionParams":
        return cls(params[f"{prefix}.kernel"])


def motion_spatial_attention(features: Tensor, params: MotionAttentionParams) -> Tensor:
    """Re-weight motion features (..., C, H, W) by a spatial attention map.

    The map is a softmax over the grid scaled by H·W, so it averages to one
    and a uniform map (zero kernel) passes features through unchanged.
    """
    alpha = softmax_spatial_scaled(conv2d(features, params.kernel))
    return hadamard(features, alpha)


@dataclass
class FusionParams:
    """Gate-bias generators between the two streams.

    ``app_to_motion`` is a 3D kernel over time-stacked appearance features
    producing the motion cell's per-step gate biases; ``motion_to_app`` is
    a 2D kernel on the current motion frame producing the attentive cell's
    biases. Both start at zero so fusion begins stream-preserving.
    """

    app_to_motion: Tensor  # (4*Dm, C_app, kT, kH, kW)
    motion_to_app: Tensor  # (4*Da, C_mot, kH, kW)

    @classmethod
    def create(cls, app_channels: int, motion_channels: int, app_memory: int,
               motion_memory: int, kernel_size: int = 3, temporal_width: int = 3) -> "FusionParams":
        return cls(
            app_to_motion=Tensor(np.zeros(
                (4 * motion_memory, app_channels, temporal_width, kernel_size, kernel_size)),
                grad_enabled=True),
            motion_to_app=Tensor(np.zeros(
                (4 * app_memory, motion_channels, kernel_size, kernel_size)), grad_enabled=True),
        )

    def as_dict(self, prefix: str) -> dict:
        return {f"{prefix}.app_to_motion": self.app_to_motion,
                f"{prefix}.motion_to_app": self.motion_to_app}

    @classmethod
    def from_dict(cls, prefix: str, params: dict) -> "FusionParams":
        return cls(params[f"{prefix}.app_to_motion"], params[f"{prefix}.motion_to_app"])


def cross_modal_rollout(
    app_frames: Tensor,
    motion_frames: Tensor,
    lsta: LstaParams,
    clstm: ConvLstmParams,
    fusion: FusionParams,
):
    """Jointly roll both cells over aligned feature sequences.

    Inputs are (T, C, H, W) or (B, T, C, H, W) with matching batch, length
    and grid. Returns the pooled final memories (appearance descriptor,
    motion descriptor).
    """
    squeeze = app_frames.ndim == 4
    fa = reshape(app_frames, (1,) + app_frames.shape) if squeeze else app_frames
    fm = reshape(motion_frames, (1,) + motion_frames.shape) if squeeze else motion_frames
    if fa.ndim != 5 or fm.ndim != 5:
        raise ShapeError(
            f"expected (B, T, C, H, W) streams, got {app_frames.shape} and {motion_frames.shape}")
    if fa.shape[:2] != fm.shape[:2] or fa.shape[-2:] != fm.shape[-2:]:
        raise ShapeError(
            f"stream layouts disagree: {tuple(fa.shape)} vs {tuple(fm.shape)}")
    b, t_len, _, h_ext, w_ext = fa.shape
    da, dm = lsta.memory, clstm.memory

    # All per-step motion-side biases come from one 3D conv over time.
    app_bias_all = conv3d(transpose(fa, (0, 2, 1, 3, 4)), fusion.app_to_motion)
    app_state = LstaState.zeros((b, da, h_ext, w_ext))
    mot_state = LstaState.zeros((b, dm, h_ext, w_ext))
    for t in range(t_len):
        motion_bias = GateBias.from_stacked(
            conv2d(index_select(fm, 1, t), fusion.motion_to_app), da)
        app_state, _ = lsta_step(index_select(fa, 1, t), app_state, lsta, bias=motion_bias)
        mot_state = convlstm_step(
            index_select(fm, 1, t), mot_state, clstm,
            bias=GateBias.from_stacked(index_select(app_bias_all, 2, t), dm))
    app_desc = spatial_avg_pool(app_state.c)
    mot_desc = spatial_avg_pool(mot_state.c)
    if squeeze:
        app_desc = reshape(app_desc, (app_desc.shape[1],))
        mot_desc = reshape(mot_desc, (mot_desc.shape[1],))
    return app_desc, mot_desc


def fuse_scores(a: ScoreTriple, b: ScoreTriple) -> ScoreTriple:
    """Elementwise arithmetic mean of two score triples, task by task."""
    def mean_one(x, y):
        if isinstance(x, Tensor) or isinstance(y, Tensor):
            if not isinstance(x, Tensor):
                x = Tensor(x)
            if not isinstance(y, Tensor):
                y = Tensor(y)
            if x.shape != y.shape:
                raise ShapeError(f"score extents differ: {x.shape} vs {y.shape}")
            return scale(add(x, y), 0.5)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise ShapeError(f"score extents differ: {x.shape} vs {y.shape}")
        return (x + y) * 0.5

    return ScoreTriple(
        verb=mean_one(a.verb, b.verb),
        noun=mean_one(a.noun, b.noun),
        action=mean_one(a.action, b.action),
    )
