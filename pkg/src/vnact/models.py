"""Model families built from the cells, backbone and heads.

Every model owns a flat name->Tensor parameter dict (the manifest
namespace used for checkpoints), exposes group_of(name) for schedule
group selection, and scores inputs into a verb/noun/action triple via
forward(). Inputs arrive as a dict of arrays: "frames" for appearance
clips, "flow" for stacked-displacement clips; either (T, C, H, W) or
batched (B, T, C, H, W).
"""

from __future__ import annotations

import json
import os
from typing import Dict, Optional

import numpy as np

from .cells import (
    ConvLstmParams,
    GruParams,
    LstaParams,
    LstaState,
    convlstm_step,
    lsta_step,
    run_lsta_gru,
)
from .errors import ShapeError, ValidationError
from .heads import LabelSpace, ScoreTriple, StructuredHeadParams, structured_forward
from .hftsn import BackboneParams, HfBlockParams, HfTsnConfig, backbone_forward, hf_tsn_forward
from .ops import index_select, reshape, spatial_avg_pool
from .tensor import Tensor
from .tnsf import load_bundle, save_bundle
from .twostream import (
    FusionParams,
    MotionAttentionParams,
    cross_modal_rollout,
    fuse_scores,
    motion_spatial_attention,
)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _get_input(inputs: Dict, key: str) -> Tensor:
    if key not in inputs:
        raise ValidationError(f"model expects input '{key}', got {sorted(inputs)}")
    t = _as_tensor(inputs[key])
    if t.ndim not in (4, 5):
        raise ShapeError(f"input '{key}' must be (T, C, H, W) or (B, T, C, H, W), got {t.shape}")
    return t


def _roll_lsta(feats: Tensor, params: LstaParams) -> Tensor:
    """Pooled final memory of the attentive cell over (B, T, C, H, W) features."""
    b, t_len, _, h_ext, w_ext = feats.shape
    state = LstaState.zeros((b, params.memory, h_ext, w_ext))
    for t in range(t_len):
        state, _ = lsta_step(index_select(feats, 1, t), state, params)
    return spatial_avg_pool(state.c)


def _roll_convlstm(feats: Tensor, params: ConvLstmParams) -> Tensor:
    b, t_len, _, h_ext, w_ext = feats.shape
    state = LstaState.zeros((b, params.memory, h_ext, w_ext))
    for t in range(t_len):
        state = convlstm_step(index_select(feats, 1, t), state, params)
    return spatial_avg_pool(state.c)


class ModelBase:
    """Shared parameter-dict plumbing for all families."""

    family = "base"

    def __init__(self, config: dict, space: LabelSpace, params: Dict[str, Tensor]):
        self.config = dict(config)
        self.space = space
        self._params = dict(params)

    def params(self) -> Dict[str, Tensor]:
        return dict(self._params)

    def set_params(self, params: Dict[str, Tensor]) -> None:
        if set(params) != set(self._params):
            missing = set(self._params) - set(params)
            extra = set(params) - set(self._params)
            raise ValidationError(f"parameter names changed (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, t in params.items():
            if t.shape != self._params[name].shape:
                raise ShapeError(
                    f"parameter '{name}' extent changed: {self._params[name].shape} -> {t.shape}")
        self._params = dict(params)

    def groups(self) -> set:
        return {self.group_of(n) for n in self._params}

    def group_of(self, name: str) -> str:
        raise NotImplementedError

    def forward(self, inputs: Dict, train: bool = False, rng=None,
                dropout_p: float = 0.0) -> ScoreTriple:
        raise NotImplementedError

    def _backbone_group(self, name: str, prefix: str = "backbone") -> Optional[str]:
        if not name.startswith(prefix + ".stage"):
            return None
        stage = int(name[len(prefix) + 6:].split(".")[0])
        last = max(int(n.split(".stage")[1].split(".")[0])
                   for n in self._params if n.startswith(prefix + ".stage"))
        return "backbone_last_stage" if stage == last else "backbone"

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        meta = {
            "family": self.family,
            "config": self.config,
            "label_space": json.loads(self.space.to_json()),
        }
        with open(os.path.join(directory, "model.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        save_bundle(os.path.join(directory, "params"),
                    {name: t.data for name, t in self._params.items()})


class LstaModel(ModelBase):
    """Appearance stream: backbone features rolled through the attentive cell."""

    family = "lsta"

    @classmethod
    def create(cls, config: dict, space: LabelSpace, seed: int) -> "LstaModel":
        cin = int(config["input_channels"])
        stages = [int(c) for c in config["stage_channels"]]
        d = int(config["memory"])
        params = {}
        params.update(BackboneParams.create(cin, stages, seed, "backbone").as_dict("backbone"))
        params.update(LstaParams.create(stages[-1], d, seed, "lsta").as_dict("lsta"))
        params.update(StructuredHeadParams.create(d, space, seed, "head").as_dict("head"))
        return cls(config, space, params)

    def group_of(self, name: str) -> str:
        bg = self._backbone_group(name)
        if bg:
            return bg
        if name.startswith("lsta."):
            return "lsta"
        if name.startswith("head."):
            return "heads"
        raise ValidationError(f"unknown parameter '{name}'")

    def forward(self, inputs, train=False, rng=None, dropout_p=0.0) -> ScoreTriple:
        frames = _get_input(inputs, "frames")
        squeeze = frames.ndim == 4
        fr = reshape(frames, (1,) + frames.shape) if squeeze else frames
        feats = backbone_forward(fr, BackboneParams.from_dict("backbone", self._params))
        desc = _roll_lsta(feats, LstaParams.from_dict("lsta", self._params))
        if squeeze:
            desc = reshape(desc, (desc.shape[1],))
        return structured_forward(desc, StructuredHeadParams.from_dict("head", self._params),
                                  self.space, train=train, rng=rng, dropout_p=dropout_p)


class LstaGruModel(ModelBase):
    """Attentive cell plus two gated aggregators over its pooled hidden maps.

    The pooled final memory and the concatenated aggregator states are
    scored by separate heads and the two triples averaged.
    """

    family = "lsta_gru"

    @classmethod
    def create(cls, config: dict, space: LabelSpace, seed: int) -> "LstaGruModel":
        cin = int(config["input_channels"])
        stages = [int(c) for c in config["stage_channels"]]
        d = int(config["memory"])
        g = int(config["gru_hidden"])
        params = {}
        params.update(BackboneParams.create(cin, stages, seed, "backbone").as_dict("backbone"))
        params.update(LstaParams.create(stages[-1], d, seed, "lsta").as_dict("lsta"))
        params.update(GruParams.create(d, g, seed, "gru_a").as_dict("gru_a"))
        params.update(GruParams.create(d, g, seed, "gru_b").as_dict("gru_b"))
        params.update(StructuredHeadParams.create(d, space, seed, "head_lsta").as_dict("head_lsta"))
        params.update(StructuredHeadParams.create(2 * g, space, seed, "head_gru").as_dict("head_gru"))
        return cls(config, space, params)

    def group_of(self, name: str) -> str:
        bg = self._backbone_group(name)
        if bg:
            return bg
        if name.startswith("lsta."):
            return "lsta"
        if name.startswith(("gru_a.", "gru_b.")):
            return "grus"
        if name.startswith(("head_lsta.", "head_gru.")):
            return "heads"
        raise ValidationError(f"unknown parameter '{name}'")

    def forward(self, inputs, train=False, rng=None, dropout_p=0.0) -> ScoreTriple:
        frames = _get_input(inputs, "frames")
        squeeze = frames.ndim == 4
        fr = reshape(frames, (1,) + frames.shape) if squeeze else frames
        feats = backbone_forward(fr, BackboneParams.from_dict("backbone", self._params))
        lsta_desc, gru_desc = run_lsta_gru(
            feats,
            LstaParams.from_dict("lsta", self._params),
            GruParams.from_dict("gru_a", self._params),
            GruParams.from_dict("gru_b", self._params),
        )
        if squeeze:
            lsta_desc = reshape(lsta_desc, (lsta_desc.shape[1],))
            gru_desc = reshape(gru_desc, (gru_desc.shape[1],))
        t_l = structured_forward(lsta_desc, StructuredHeadParams.from_dict("head_lsta", self._params),
                                 self.space, train=train, rng=rng, dropout_p=dropout_p)
        t_g = structured_forward(gru_desc, StructuredHeadParams.from_dict("head_gru", self._params),
                                 self.space, train=train, rng=rng, dropout_p=dropout_p)
        return fuse_scores(t_l, t_g)


class HfTsnModel(ModelBase):
    """Segment consensus network with temporal-interaction blocks."""

    family = "hf_tsn"

    @classmethod
    def create(cls, config: dict, space: LabelSpace, seed: int) -> "HfTsnModel":
        cin = int(config["input_channels"])
        net = HfTsnConfig(segments=int(config["segments"]),
                          stages=tuple(int(c) for c in config["stage_channels"]),
                          hf_positions=tuple(int(p) for p in config["hf_positions"]))
        params = {}
        params.update(BackboneParams.create(cin, list(net.stages), seed, "backbone").as_dict("backbone"))
        widths = [cin] + list(net.stages)
        for p in net.hf_positions:
            params.update(HfBlockParams.create(widths[p]).as_dict(f"hf.{p}"))
        params.update(StructuredHeadParams.create(net.stages[-1], space, seed, "head").as_dict("head"))
        return cls(config, space, params)

    def _net_config(self) -> HfTsnConfig:
        return HfTsnConfig(segments=int(self.config["segments"]),
                           stages=tuple(int(c) for c in self.config["stage_channels"]),
                           hf_positions=tuple(int(p) for p in self.config["hf_positions"]))

    def group_of(self, name: str) -> str:
        bg = self._backbone_group(name)
        if bg:
            return bg
        if name.startswith("hf."):
            return "hf"
        if name.startswith("head."):
            return "heads"
        raise ValidationError(f"unknown parameter '{name}'")

    def forward(self, inputs, train=False, rng=None, dropout_p=0.0) -> ScoreTriple:
        frames = _get_input(inputs, "frames")
        net = self._net_config()
        hf = {p: HfBlockParams.from_dict(f"hf.{p}", self._params) for p in net.hf_positions}
        return hf_tsn_forward(
            frames, net,
            BackboneParams.from_dict("backbone", self._params),
            hf,
            StructuredHeadParams.from_dict("head", self._params),
            self.space, train=train, rng=rng, dropout_p=dropout_p)


class MotionModel(ModelBase):
    """Motion stream: attention-sharpened flow features into a ConvLSTM."""

    family = "motion"

    @classmethod
    def create(cls, config: dict, space: LabelSpace, seed: int) -> "MotionModel":
        cin = int(config["flow_channels"])
        stages = [int(c) for c in config["stage_channels"]]
        d = int(config["memory"])
        params = {}
        params.update(BackboneParams.create(cin, stages, seed, "backbone").as_dict("backbone"))
        params.update(MotionAttentionParams.create(stages[-1]).as_dict("attn"))
        params.update(ConvLstmParams.create(stages[-1], d, seed, "convlstm").as_dict("convlstm"))
        params.update(StructuredHeadParams.create(d, space, seed, "head").as_dict("head"))
        return cls(config, space, params)

    def group_of(self, name: str) -> str:
        bg = self._backbone_group(name)
        if bg:
            return bg
        if name.startswith("attn."):
            return "motion_attn"
        if name.startswith("convlstm."):
            return "convlstm"
        if name.startswith("head."):
            return "heads"
        raise ValidationError(f"unknown parameter '{name}'")

    def motion_features(self, flow: Tensor) -> Tensor:
        feats = backbone_forward(flow, BackboneParams.from_dict("backbone", self._params))
        return motion_spatial_attention(feats, MotionAttentionParams.from_dict("attn", self._params))

    def forward(self, inputs, train=False, rng=None, dropout_p=0.0) -> ScoreTriple:
        flow = _get_input(inputs, "flow")
        squeeze = flow.ndim == 4
        fl = reshape(flow, (1,) + flow.shape) if squeeze else flow
        feats = self.motion_features(fl)
        desc = _roll_convlstm(feats, ConvLstmParams.from_dict("convlstm", self._params))
        if squeeze:
            desc = reshape(desc, (desc.shape[1],))
        return structured_forward(desc, StructuredHeadParams.from_dict("head", self._params),
                                  self.space, train=train, rng=rng, dropout_p=dropout_p)


class TwoStreamModel(ModelBase):
    """Appearance and motion streams coupled by cross-modal gate biases.

    Stream parameters live under the "app." and "motion." prefixes; the
    fusion kernels under "fusion." start at zero, so a freshly fused model
    scores exactly like the average of its two source streams.
    """

    family = "two_stream"

    @classmethod
    def create(cls, config: dict, space: LabelSpace, seed: int) -> "TwoStreamModel":
        app = LstaModel.create(config["app"], space, seed)
        motion = MotionModel.create(config["motion"], space, seed)
        return cls.from_streams(app, motion, config)

    @classmethod
    def from_streams(cls, app: LstaModel, motion: MotionModel,
                     config: Optional[dict] = None) -> "TwoStreamModel":
        if app.space.space_hash() != motion.space.space_hash():
            raise ValidationError("streams disagree on the label space")
        config = dict(config) if config else {}
        config.setdefault("app", dict(app.config))
        config.setdefault("motion", dict(motion.config))
        config.setdefault("fusion_kernel", 3)
        config.setdefault("fusion_temporal_width", 3)
        params = {}
        for name, t in app.params().items():
            params[f"app.{name}"] = t
        for name, t in motion.params().items():
            params[f"motion.{name}"] = t
        fusion = FusionParams.create(
            app_channels=int(config["app"]["stage_channels"][-1]),
            motion_channels=int(config["motion"]["stage_channels"][-1]),
            app_memory=int(config["app"]["memory"]),
            motion_memory=int(config["motion"]["memory"]),
            kernel_size=int(config["fusion_kernel"]),
            temporal_width=int(config["fusion_temporal_width"]))
        params.update(fusion.as_dict("fusion"))
        return cls(config, app.space, params)

    def group_of(self, name: str) -> str:
        if name.startswith("fusion."):
            return "fusion"
        for stream in ("app", "motion"):
            pre = stream + "."
            if name.startswith(pre):
                inner = name[len(pre):]
                bg = self._backbone_group(name, prefix=pre + "backbone")
                if bg:
                    return bg
                if inner.startswith("lsta."):
                    return "lsta"
                if inner.startswith("attn."):
                    return "motion_attn"
                if inner.startswith("convlstm."):
                    return "convlstm"
                if inner.startswith("head."):
                    return "heads"
        raise ValidationError(f"unknown parameter '{name}'")

    def forward(self, inputs, train=False, rng=None, dropout_p=0.0) -> ScoreTriple:
        frames = _get_input(inputs, "frames")
        flow = _get_input(inputs, "flow")
        squeeze = frames.ndim == 4
        if squeeze != (flow.ndim == 4):
            raise ShapeError("frames and flow must agree on batching")
        fr = reshape(frames, (1,) + frames.shape) if squeeze else frames
        fl = reshape(flow, (1,) + flow.shape) if squeeze else flow
        app_feats = backbone_forward(fr, BackboneParams.from_dict("app.backbone", self._params))
        mot_feats = motion_spatial_attention(
            backbone_forward(fl, BackboneParams.from_dict("motion.backbone", self._params)),
            MotionAttentionParams.from_dict("motion.attn", self._params))
        app_desc, mot_desc = cross_modal_rollout(
            app_feats, mot_feats,
            LstaParams.from_dict("app.lsta", self._params),
            ConvLstmParams.from_dict("motion.convlstm", self._params),
            FusionParams.from_dict("fusion", self._params))
        if squeeze:
            app_desc = reshape(app_desc, (app_desc.shape[1],))
            mot_desc = reshape(mot_desc, (mot_desc.shape[1],))
        t_a = structured_forward(app_desc, StructuredHeadParams.from_dict("app.head", self._params),
                                 self.space, train=train, rng=rng, dropout_p=dropout_p)
        t_m = structured_forward(mot_desc, StructuredHeadParams.from_dict("motion.head", self._params),
                                 self.space, train=train, rng=rng, dropout_p=dropout_p)
        return fuse_scores(t_a, t_m)


FAMILIES = {
    cls.family: cls for cls in (LstaModel, LstaGruModel, HfTsnModel, MotionModel, TwoStreamModel)
}


def create_model(family: str, config: dict, space: LabelSpace, seed: int) -> ModelBase:
    if family not in FAMILIES:
        raise ValidationError(f"unknown model family '{family}' (have {sorted(FAMILIES)})")
    return FAMILIES[family].create(config, space, seed)


def load_model(directory) -> ModelBase:
    meta_path = os.path.join(directory, "model.json")
    if not os.path.exists(meta_path):
        raise ValidationError(f"no model.json under {directory}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    for key in ("family", "config", "label_space"):
        if key not in meta:
            raise ValidationError(f"model.json: missing key '{key}'")
    space = LabelSpace.from_json(json.dumps(meta["label_space"]))
    model = create_model(meta["family"], meta["config"], space, seed=0)
    stored = load_bundle(os.path.join(directory, "params"))
    model.set_params({name: Tensor(arr, grad_enabled=True) for name, arr in stored.items()})
    return model
