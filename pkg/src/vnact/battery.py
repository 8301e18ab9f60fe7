"""Standard gradient-check battery.

Each entry is a named deterministic scalar loss over a parameter dict,
sized to keep the full battery under the two-minute budget. Losses probe
the op outputs against fixed random weights so every output coordinate
influences the loss.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from .cells import (
    ConvLstmParams,
    GruParams,
    LstaParams,
    LstaState,
    convlstm_step,
    gru_step,
    lsta_step,
)
from .gradcheck import GradReport, grad_check
from .heads import StructuredHeadParams, multi_task_loss, structured_forward
from .hftsn import HfBlockParams, consensus, hf_block
from .init import rng_for
from .models import create_model
from .ops import conv2d, conv3d, matmul, mean_all
from .synthetic import default_label_space
from .tensor import Tensor, add, hadamard
from .twostream import FusionParams, MotionAttentionParams, cross_modal_rollout, motion_spatial_attention

Entry = Tuple[str, Callable, Dict[str, Tensor]]


def _param(rng, shape) -> Tensor:
    return Tensor(rng.normal(0.0, 0.5, size=shape), grad_enabled=True)


def _probe_loss(out: Tensor, probe: np.ndarray) -> Tensor:
    return mean_all(hadamard(out, Tensor(probe)))


def _entry_matmul(rng) -> Entry:
    params = {"a": _param(rng, (3, 4)), "b": _param(rng, (4, 2))}
    probe = rng.normal(size=(3, 2))
    return "matmul", lambda p: _probe_loss(matmul(p["a"], p["b"]), probe), params


def _entry_conv2d(rng) -> Entry:
    params = {"x": _param(rng, (2, 5, 5)), "k": _param(rng, (3, 2, 3, 3))}
    probe = rng.normal(size=(3, 5, 5))
    return "conv2d", lambda p: _probe_loss(conv2d(p["x"], p["k"]), probe), params


def _entry_conv3d(rng) -> Entry:
    params = {"x": _param(rng, (2, 3, 4, 4)), "k": _param(rng, (2, 2, 3, 3, 3))}
    probe = rng.normal(size=(2, 3, 4, 4))
    return "conv3d", lambda p: _probe_loss(conv3d(p["x"], p["k"]), probe), params


def _entry_lsta_step(rng) -> Entry:
    c, d, h, w = 3, 3, 4, 4
    base = LstaParams.create(c, d, int(rng.integers(1 << 30)), "g")
    params = {
        "x": _param(rng, (c, h, w)), "c0": _param(rng, (d, h, w)), "h0": _param(rng, (d, h, w)),
        "attn": base.attn_kernel, "gates": base.gate_kernel,
        "gbias": base.gate_bias, "pool": base.pool_kernel,
    }
    pc, ph = rng.normal(size=(d, h, w)), rng.normal(size=(d, h, w))

    def forward(p):
        lp = LstaParams(attn_kernel=p["attn"], gate_kernel=p["gates"],
                        gate_bias=p["gbias"], pool_kernel=p["pool"])
        state, _ = lsta_step(p["x"], LstaState(c=p["c0"], h=p["h0"]), lp)
        return add(_probe_loss(state.c, pc), _probe_loss(state.h, ph))

    return "lsta_step", forward, params


def _entry_convlstm_step(rng) -> Entry:
    c, d, h, w = 3, 2, 4, 4
    base = ConvLstmParams.create(c, d, int(rng.integers(1 << 30)), "g")
    params = {
        "x": _param(rng, (c, h, w)), "c0": _param(rng, (d, h, w)), "h0": _param(rng, (d, h, w)),
        "gates": base.gate_kernel, "gbias": base.gate_bias,
    }
    pc, ph = rng.normal(size=(d, h, w)), rng.normal(size=(d, h, w))

    def forward(p):
        lp = ConvLstmParams(gate_kernel=p["gates"], gate_bias=p["gbias"])
        state = convlstm_step(p["x"], LstaState(c=p["c0"], h=p["h0"]), lp)
        return add(_probe_loss(state.c, pc), _probe_loss(state.h, ph))

    return "convlstm_step", forward, params


def _entry_gru_step(rng) -> Entry:
    cin, d = 5, 4
    base = GruParams.create(cin, d, int(rng.integers(1 << 30)), "g")
    params = {"x": _param(rng, (cin,)), "h": _param(rng, (d,))}
    params.update({k.split(".")[1]: v for k, v in base.as_dict("g").items()})
    probe = rng.normal(size=(d,))

    def forward(p):
        gp = GruParams(w_update=p["w_update"], b_update=p["b_update"], w_reset=p["w_reset"],
                       b_reset=p["b_reset"], w_cand=p["w_cand"], b_cand=p["b_cand"])
        return _probe_loss(gru_step(p["x"], p["h"], gp), probe)

    return "gru_step", forward, params


def _entry_hf_block(rng) -> Entry:
    t, c, h, w = 4, 3, 3, 3
    params = {"f": _param(rng, (t, c, h, w)), "w0": _param(rng, (c,)), "w1": _param(rng, (c,))}
    probe = rng.normal(size=(t, c, h, w))

    def forward(p):
        return _probe_loss(hf_block(p["f"], HfBlockParams(w0=p["w0"], w1=p["w1"])), probe)

    return "hf_block", forward, params


def _entry_consensus(rng) -> Entry:
    params = {"s": _param(rng, (5, 7))}
    probe = rng.normal(size=(7,))
    return "consensus", lambda p: _probe_loss(consensus(p["s"]), probe), params


def _entry_structured(rng, seed) -> Entry:
    space = default_label_space(3, 4, 6, seed=0)
    feat_dim, batch = 5, 3
    base = StructuredHeadParams.create(feat_dim, space, seed, "h")
    params = {"feat": _param(rng, (batch, feat_dim))}
    params.update({k.split(".", 1)[1]: v for k, v in base.as_dict("h").items()})
    # Random bias maps so the coupling path gets exercised.
    params["bias_verb"] = _param(rng, (space.num_actions, space.num_verbs))
    params["bias_noun"] = _param(rng, (space.num_actions, space.num_nouns))
    actions = rng.integers(0, space.num_actions, size=batch)
    pairs = np.asarray(space.actions)
    labels = (pairs[actions, 0], pairs[actions, 1], actions)

    def forward(p):
        head = StructuredHeadParams(
            w_verb=p["w_verb"], b_verb=p["b_verb"], w_noun=p["w_noun"], b_noun=p["b_noun"],
            w_act=p["w_act"], b_act=p["b_act"], bias_verb=p["bias_verb"], bias_noun=p["bias_noun"])
        return multi_task_loss(structured_forward(p["feat"], head, space), labels)

    return "structured_multi_task", forward, params


def _entry_motion_attention(rng) -> Entry:
    c, h, w = 3, 4, 4
    params = {"feat": _param(rng, (c, h, w)), "kernel": _param(rng, (1, c, 1, 1))}
    probe = rng.normal(size=(c, h, w))

    def forward(p):
        return _probe_loss(
            motion_spatial_attention(p["feat"], MotionAttentionParams(kernel=p["kernel"])), probe)

    return "motion_spatial_attention", forward, params


def _entry_cross_modal(rng, seed) -> Entry:
    t, ca, cm, da, dm, h, w = 2, 2, 2, 2, 2, 3, 3
    lsta = LstaParams.create(ca, da, seed, "a")
    clstm = ConvLstmParams.create(cm, dm, seed, "m")
    params = {
        "app": _param(rng, (t, ca, h, w)), "mot": _param(rng, (t, cm, h, w)),
        "a2m": _param(rng, (4 * dm, ca, 3, 3, 3)), "m2a": _param(rng, (4 * da, cm, 3, 3)),
    }
    params.update({"l_" + k.split(".")[1]: v for k, v in lsta.as_dict("a").items()})
    params.update({"c_" + k.split(".")[1]: v for k, v in clstm.as_dict("m").items()})
    pa, pm = rng.normal(size=(da,)), rng.normal(size=(dm,))

    def forward(p):
        lp = LstaParams(attn_kernel=p["l_attn_kernel"], gate_kernel=p["l_gate_kernel"],
                        gate_bias=p["l_gate_bias"], pool_kernel=p["l_pool_kernel"])
        cp = ConvLstmParams(gate_kernel=p["c_gate_kernel"], gate_bias=p["c_gate_bias"])
        fp = FusionParams(app_to_motion=p["a2m"], motion_to_app=p["m2a"])
        app_desc, mot_desc = cross_modal_rollout(p["app"], p["mot"], lp, cp, fp)
        return add(_probe_loss(app_desc, pa), _probe_loss(mot_desc, pm))

    return "cross_modal_rollout", forward, params


_FAMILY_CONFIGS = {
    "lsta": {"input_channels": 2, "stage_channels": [2, 3], "memory": 2},
    "lsta_gru": {"input_channels": 2, "stage_channels": [2, 3], "memory": 2, "gru_hidden": 2},
    "hf_tsn": {"input_channels": 2, "stage_channels": [2, 3], "segments": 2, "hf_positions": [0, 1]},
    "motion": {"flow_channels": 2, "stage_channels": [2, 3], "memory": 2},
    "two_stream": {"app": {"input_channels": 2, "stage_channels": [2, 3], "memory": 2},
                   "motion": {"flow_channels": 2, "stage_channels": [2, 3], "memory": 2},
                   "fusion_kernel": 1, "fusion_temporal_width": 1},
}


def _entry_family(family: str, seed: int) -> Entry:
    rng = rng_for(seed, f"battery:{family}")
    space = default_label_space(3, 4, 6, seed=0)
    model = create_model(family, _FAMILY_CONFIGS[family], space, seed)
    t, h, w = 2, 4, 4
    inputs = {}
    if family != "motion":
        inputs["frames"] = rng.normal(size=(t, 2, h, w))
    if family in ("motion", "two_stream"):
        inputs["flow"] = rng.normal(size=(t, 2, h, w))
    actions = rng.integers(0, space.num_actions, size=1)
    pairs = np.asarray(space.actions)
    labels = (int(pairs[actions[0], 0]), int(pairs[actions[0], 1]), int(actions[0]))
    # Zero-initialized fusion/attention kernels sit at softmax saddle points
    # where finite differences are fine but uninformative; nudge them.
    params = model.params()
    for name, tns in params.items():
        if not np.any(tns.data):
            params[name] = Tensor(tns.data + rng.normal(0.0, 0.05, size=tns.shape),
                                  grad_enabled=True)
    model.set_params(params)

    def forward(p):
        model.set_params(p)
        return multi_task_loss(model.forward(inputs), labels)

    return f"family_{family}", forward, model.params()


def standard_battery(seed: int = 0, instances: int = 3) -> List[Entry]:
    """The acceptance battery: op-level entries × instances, one end-to-end
    loss per model family."""
    makers = [
        _entry_matmul, _entry_conv2d, _entry_conv3d, _entry_lsta_step,
        _entry_convlstm_step, _entry_gru_step, _entry_hf_block, _entry_consensus,
        _entry_motion_attention,
    ]
    entries: List[Entry] = []
    for i in range(instances):
        rng = rng_for(seed, f"battery:{i}")
        for make in makers:
            name, fwd, params = make(rng)
            entries.append((f"{name}[{i}]", fwd, params))
        name, fwd, params = _entry_structured(rng, seed + i)
        entries.append((f"{name}[{i}]", fwd, params))
        name, fwd, params = _entry_cross_modal(rng, seed + i)
        entries.append((f"{name}[{i}]", fwd, params))
    for family in sorted(_FAMILY_CONFIGS):
        entries.append(_entry_family(family, seed))
    return entries


def run_battery(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
                instances: int = 3) -> List[Tuple[str, GradReport]]:
    return [(name, grad_check(fwd, params, eps=eps, tol=tol))
            for name, fwd, params in standard_battery(seed, instances)]
