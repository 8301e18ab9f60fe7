"""Synthetic labeled video surrogate.

Each sample is a T×C×H×W clip whose verb plants a temporal signature (a
class-phased sinusoid added uniformly over channel 0) and whose noun
plants a spatial one (a corner blob on channel 1 whose corner and
amplitude encode the class), plus i.i.d. Gaussian noise. The sinusoid
frequency is deliberately non-integer so the sampled values of two
different phases never form shifted copies of one another, keeping the
verb classes separable even for consensus models that only see the
per-frame value distribution.

Labels are always drawn from the observed-action vocabulary, so every
generated (verb, noun) pair is feasible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .errors import ValidationError
from .heads import LabelSpace
from .init import rng_for

# Signature constants; gains below are per-modality multipliers on these.
VERB_FREQ = 1.5  # cycles per clip; non-integer on purpose (see module docstring)
VERB_AMP = 1.0
NOUN_AMP = 1.2
NOUN_LEVEL_STEP = 0.9  # amplitude gap between corner reuse levels
BLOB_SIGMA_FRAC = 1 / 6  # blob width as a fraction of frame height

# Per-modality signature gains: the motion modality carries a stronger
# temporal cue and a weaker spatial one, mirroring what displacement
# fields would preserve.
MODALITY_GAINS = {
    "appearance": {"verb": 1.0, "noun": 1.0},
    "flow": {"verb": 1.5, "noun": 0.4},
}


def verb_template(verb: int, num_verbs: int, t_len: int) -> np.ndarray:
    """Noiseless temporal signature (T,) of a verb class."""
    t = np.arange(t_len)
    phase = 2.0 * np.pi * verb / num_verbs
    return VERB_AMP * np.sin(2.0 * np.pi * VERB_FREQ * (t + 0.5) / t_len + phase)


def noun_template(noun: int, height: int, width: int) -> np.ndarray:
    """Noiseless spatial signature (H, W) of a noun class.

    The class picks one of the four corners and an amplitude level, so
    position and magnitude jointly encode it.
    """
    corner = noun % 4
    level = 1.0 + NOUN_LEVEL_STEP * (noun // 4)
    m = max(1, height // 5)
    centers = [(m, m), (m, width - 1 - m), (height - 1 - m, m), (height - 1 - m, width - 1 - m)]
    cy, cx = centers[corner]
    yy, xx = np.mgrid[0:height, 0:width]
    sigma = max(1.0, height * BLOB_SIGMA_FRAC)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
    return NOUN_AMP * level * blob


def clean_clip(verb: int, noun: int, space: LabelSpace, t_len: int, channels: int,
               height: int, width: int, verb_gain: float = 1.0, noun_gain: float = 1.0) -> np.ndarray:
    """Noiseless clip (T, C, H, W) for a (verb, noun) pair."""
    clip = np.zeros((t_len, channels, height, width))
    wave = verb_gain * verb_template(verb, space.num_verbs, t_len)
    clip[:, 0] += wave[:, None, None]
    if channels > 1:
        clip[:, 1] += noun_gain * noun_template(noun, height, width)
    return clip


@dataclass
class SyntheticDataset:
    """Labeled clips for one or more modalities, all sharing the labels."""

    space: LabelSpace
    segment_ids: List[str]
    inputs: Dict[str, np.ndarray]  # modality key -> (n, T, C, H, W)
    verbs: np.ndarray
    nouns: np.ndarray
    actions: np.ndarray
    split_tag: str = "custom"

    def __post_init__(self):
        n = len(self.segment_ids)
        if len(set(self.segment_ids)) != n:
            raise ValidationError("duplicate segment ids")
        for key, arr in self.inputs.items():
            if arr.ndim != 5 or arr.shape[0] != n:
                raise ValidationError(f"input '{key}' must be (n, T, C, H, W) with n={n}, got {arr.shape}")
        for name, arr in (("verbs", self.verbs), ("nouns", self.nouns), ("actions", self.actions)):
            if arr.shape != (n,):
                raise ValidationError(f"label array '{name}' must have shape ({n},), got {arr.shape}")

    def __len__(self) -> int:
        return len(self.segment_ids)

    def batch(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        inputs = {k: arr[idx] for k, arr in self.inputs.items()}
        return inputs, (self.verbs[idx], self.nouns[idx], self.actions[idx])

    def labels_by_segment(self) -> Dict[str, tuple]:
        return {seg: (int(self.verbs[i]), int(self.nouns[i]), int(self.actions[i]))
                for i, seg in enumerate(self.segment_ids)}

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "label_space.json"), "w") as fh:
            fh.write(self.space.to_json())
        meta = {"split_tag": self.split_tag, "segment_ids": self.segment_ids,
                "modalities": sorted(self.inputs)}
        with open(os.path.join(directory, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        arrays = {f"input_{k}": v for k, v in self.inputs.items()}
        np.savez(os.path.join(directory, "data.npz"), verbs=self.verbs, nouns=self.nouns,
                 actions=self.actions, **arrays)

    @classmethod
    def load(cls, directory) -> "SyntheticDataset":
        for fname in ("label_space.json", "meta.json", "data.npz"):
            if not os.path.exists(os.path.join(directory, fname)):
                raise ValidationError(f"dataset directory {directory} is missing {fname}")
        with open(os.path.join(directory, "label_space.json")) as fh:
            space = LabelSpace.from_json(fh.read())
        with open(os.path.join(directory, "meta.json")) as fh:
            meta = json.load(fh)
        data = np.load(os.path.join(directory, "data.npz"))
        inputs = {k[len("input_"):]: data[k] for k in data.files if k.startswith("input_")}
        return cls(space=space, segment_ids=list(meta["segment_ids"]), inputs=inputs,
                   verbs=data["verbs"], nouns=data["nouns"], actions=data["actions"],
                   split_tag=meta["split_tag"])


def _draw_labels(space: LabelSpace, n_samples: int, seed: int):
    rng = rng_for(seed, "labels")
    actions = rng.integers(0, space.num_actions, size=n_samples).astype(np.int64)
    pairs = np.asarray(space.actions, dtype=np.int64)
    return pairs[actions, 0], pairs[actions, 1], actions


def _render_modality(space, verbs, nouns, t_len, channels, height, width,
                     noise_sigma, seed, modality) -> np.ndarray:
    if modality not in MODALITY_GAINS:
        raise ValidationError(f"unknown modality '{modality}' (have {sorted(MODALITY_GAINS)})")
    gains = MODALITY_GAINS[modality]
    rng = rng_for(seed, modality)
    n = len(verbs)
    clips = rng.normal(0.0, noise_sigma, size=(n, t_len, channels, height, width)) \
        if noise_sigma > 0 else np.zeros((n, t_len, channels, height, width))
    for i in range(n):
        clips[i] += clean_clip(int(verbs[i]), int(nouns[i]), space, t_len, channels,
                               height, width, gains["verb"], gains["noun"])
    return clips


def make_synthetic(space: LabelSpace, n_samples: int, t_len: int, channels: int,
                   height: int, width: int, noise_sigma: float, seed: int,
                   modality: str = "appearance", split_tag: str = "custom") -> SyntheticDataset:
    """Generate labeled single-modality clips; same seed, same bits."""
    if space.num_actions == 0:
        raise ValidationError("label space has no actions")
    if min(n_samples, t_len, channels, height, width) < 1:
        raise ValidationError("all extents must be positive")
    if noise_sigma < 0:
        raise ValidationError(f"noise_sigma must be nonnegative, got {noise_sigma}")
    verbs, nouns, actions = _draw_labels(space, n_samples, seed)
    key = "flow" if modality == "flow" else "frames"
    clips = _render_modality(space, verbs, nouns, t_len, channels, height, width,
                             noise_sigma, seed, modality)
    ids = [f"{split_tag}_{i:05d}" for i in range(n_samples)]
    return SyntheticDataset(space=space, segment_ids=ids, inputs={key: clips},
                            verbs=verbs, nouns=nouns, actions=actions, split_tag=split_tag)


def make_two_stream_synthetic(space: LabelSpace, n_samples: int, t_len: int,
                              channels: int, flow_channels: int, height: int, width: int,
                              noise_sigma: float, seed: int,
                              split_tag: str = "custom") -> SyntheticDataset:
    """Generate paired appearance and flow clips sharing the same labels."""
    if flow_channels % 2:
        raise ValidationError(f"flow channel count must be even (x/y pairs), got {flow_channels}")
    verbs, nouns, actions = _draw_labels(space, n_samples, seed)
    frames = _render_modality(space, verbs, nouns, t_len, channels, height, width,
                              noise_sigma, seed, "appearance")
    flow = _render_modality(space, verbs, nouns, t_len, flow_channels, height, width,
                            noise_sigma, seed, "flow")
    ids = [f"{split_tag}_{i:05d}" for i in range(n_samples)]
    return SyntheticDataset(space=space, segment_ids=ids,
                            inputs={"frames": frames, "flow": flow},
                            verbs=verbs, nouns=nouns, actions=actions, split_tag=split_tag)


def default_label_space(num_verbs: int = 6, num_nouns: int = 8, num_actions: int = 12,
                        seed: int = 0) -> LabelSpace:
    """A label space whose actions cover every verb and noun at least once."""
    if num_actions < max(num_verbs, num_nouns):
        raise ValidationError("need at least max(V, N) actions to cover both vocabularies")
    if num_actions > num_verbs * num_nouns:
        raise ValidationError("more actions than distinct (verb, noun) pairs")
    rng = rng_for(seed, "label-space")
    # (i mod V, i mod N) for i < max(V, N) covers both vocabularies and stays
    # duplicate-free because max(V, N) ≤ lcm(V, N); the rest is random fill.
    pairs = [(i % num_verbs, i % num_nouns) for i in range(max(num_verbs, num_nouns))]
    seen = set(pairs)
    while len(pairs) < num_actions:
        v = int(rng.integers(0, num_verbs))
        n = int(rng.integers(0, num_nouns))
        if (v, n) not in seen:
            pairs.append((v, n))
            seen.add((v, n))
    verbs = [f"verb_{i}" for i in range(num_verbs)]
    nouns = [f"noun_{i}" for i in range(num_nouns)]
    return LabelSpace(verbs=tuple(verbs), nouns=tuple(nouns), actions=tuple(pairs[:num_actions]))
