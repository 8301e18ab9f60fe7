"""Structured verb/noun/action prediction.

Actions are the verb-noun pairs observed in the annotations, so the
action classifier can only name feasible combinations. Its raw logits are
fed through two linear maps and added to the verb and noun logits as an
instance-specific bias, coupling the three tasks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .init import uniform_fan_in, zeros_param
from .ops import affine, dropout, logsumexp_rows, matmul, mean_all, reshape, take_rows
from .tensor import Tensor, add, subtract


@dataclass(frozen=True)
class LabelSpace:
    """Verb and noun vocabularies plus the observed action vocabulary.

    ``actions[a]`` is the (verb_id, noun_id) pair of action ``a``; the
    reverse map is injective and covers exactly the observed pairs.
    """

    verbs: tuple
    nouns: tuple
    actions: tuple

    def __post_init__(self):
        seen = {}
        for a, (v, n) in enumerate(self.actions):
            if not (0 <= v < len(self.verbs)) or not (0 <= n < len(self.nouns)):
                raise ValidationError(f"action {a} pair ({v},{n}) outside vocabularies")
            if (v, n) in seen:
                raise ValidationError(f"duplicate action pair ({v},{n})")
            seen[(v, n)] = a

    @property
    def num_verbs(self) -> int:
        return len(self.verbs)

    @property
    def num_nouns(self) -> int:
        return len(self.nouns)

    @property
    def num_actions(self) -> int:
        return len(self.actions)

    @property
    def pair_to_action(self) -> dict:
        return {(v, n): a for a, (v, n) in enumerate(self.actions)}

    def to_json(self) -> str:
        payload = {
            "verbs": list(self.verbs),
            "nouns": list(self.nouns),
            "actions": [list(p) for p in self.actions],
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LabelSpace":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"label space: invalid JSON ({exc})") from exc
        for key in ("verbs", "nouns", "actions"):
            if key not in payload:
                raise ValidationError(f"label space: missing key '{key}'")
        return cls(
            verbs=tuple(payload["verbs"]),
            nouns=tuple(payload["nouns"]),
            actions=tuple((int(v), int(n)) for v, n in payload["actions"]),
        )

    def space_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def build_label_space(
    annotations: Iterable[tuple],
    verbs: Optional[Sequence[str]] = None,
    nouns: Optional[Sequence[str]] = None,
) -> LabelSpace:
    """Enumerate observed verb-noun pairs, in first-occurrence order.

    ``annotations`` yields (segment_id, verb_id, noun_id). When the
    vocabulary name lists are omitted they default to generated names
    sized by the largest id seen.
    """
    pairs: list[tuple] = []
    seen = set()
    max_v = max_n = -1
    for seg, v, n in annotations:
        v, n = int(v), int(n)
        if v < 0 or n < 0:
            raise ValidationError(f"segment {seg}: negative label id ({v},{n})")
        if verbs is not None and v >= len(verbs):
            raise ValidationError(f"segment {seg}: verb id {v} outside vocabulary of {len(verbs)}")
        if nouns is not None and n >= len(nouns):
            raise ValidationError(f"segment {seg}: noun id {n} outside vocabulary of {len(nouns)}")
        max_v, max_n = max(max_v, v), max(max_n, n)
        if (v, n) not in seen:
            seen.add((v, n))
            pairs.append((v, n))
    if verbs is None:
        verbs = [f"verb_{i}" for i in range(max_v + 1)]
    if nouns is None:
        nouns = [f"noun_{i}" for i in range(max_n + 1)]
    return LabelSpace(verbs=tuple(verbs), nouns=tuple(nouns), actions=tuple(pairs))


def derive_pair(action_id: int, space: LabelSpace) -> tuple:
    """Recover the (verb_id, noun_id) pair an action was built from."""
    if not 0 <= action_id < space.num_actions:
        raise ValidationError(f"action id {action_id} outside vocabulary of {space.num_actions}")
    return space.actions[action_id]


@dataclass
class ScoreTriple:
    """Verb, noun and action logits: the unit of prediction and fusion."""

    verb: object
    noun: object
    action: object

    def detached(self) -> "ScoreTriple":
        def unwrap(x):
            return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

        return ScoreTriple(unwrap(self.verb), unwrap(self.noun), unwrap(self.action))

    def task(self, name: str):
        if name not in ("verb", "noun", "action"):
            raise ValidationError(f"unknown task '{name}'")
        return getattr(self, name)


@dataclass
class StructuredHeadParams:
    """Three linear classifiers plus the two action-to-bias maps."""

    w_verb: Tensor
    b_verb: Tensor
    w_noun: Tensor
    b_noun: Tensor
    w_act: Tensor
    b_act: Tensor
    bias_verb: Tensor  # (A, V)
    bias_noun: Tensor  # (A, N)

    @classmethod
    def create(cls, feature_dim: int, space: LabelSpace, seed: int, name: str = "head"):
        f = feature_dim
        return cls(
            w_verb=uniform_fan_in((f, space.num_verbs), f, seed, f"{name}.w_verb"),
            b_verb=zeros_param((space.num_verbs,)),
            w_noun=uniform_fan_in((f, space.num_nouns), f, seed, f"{name}.w_noun"),
            b_noun=zeros_param((space.num_nouns,)),
            w_act=uniform_fan_in((f, space.num_actions), f, seed, f"{name}.w_act"),
            b_act=zeros_param((space.num_actions,)),
            # Zero bias maps: training starts at the unbiased multi-task point.
            bias_verb=zeros_param((space.num_actions, space.num_verbs)),
            bias_noun=zeros_param((space.num_actions, space.num_nouns)),
        )

    def as_dict(self, prefix: str) -> dict:
        return {
            f"{prefix}.w_verb": self.w_verb,
            f"{prefix}.b_verb": self.b_verb,
            f"{prefix}.w_noun": self.w_noun,
            f"{prefix}.b_noun": self.b_noun,
            f"{prefix}.w_act": self.w_act,
            f"{prefix}.b_act": self.b_act,
            f"{prefix}.bias_verb": self.bias_verb,
            f"{prefix}.bias_noun": self.bias_noun,
        }

    @classmethod
    def from_dict(cls, prefix: str, params: dict) -> "StructuredHeadParams":
        return cls(*(params[f"{prefix}.{f}"] for f in (
            "w_verb", "b_verb", "w_noun", "b_noun", "w_act", "b_act", "bias_verb", "bias_noun")))


def structured_forward(
    feature: Tensor,
    params: StructuredHeadParams,
    space: LabelSpace,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    dropout_p: float = 0.0,
) -> ScoreTriple:
    """Score a feature vector (F,) or batch (B, F) against all three tasks.

    Action logits double as an instance-specific bias on the verb and noun
    classifiers through the two linear bias maps. Dropout, when training,
    is applied to the feature ahead of all three classifiers.
    """
    squeeze = feature.ndim == 1
    f = reshape(feature, (1, -1)) if squeeze else feature
    if f.ndim != 2 or f.shape[1] != params.w_verb.shape[0]:
        raise ShapeError(f"feature shape {feature.shape} mismatches head of {params.w_verb.shape}")
    if params.w_verb.shape[1] != space.num_verbs or params.w_act.shape[1] != space.num_actions:
        raise ShapeError("head extents do not match the label space")
    if train and dropout_p > 0.0:
        if rng is None:
            raise ValidationError("dropout requires an rng in training mode")
        f = dropout(f, dropout_p, rng)
    act = affine(f, params.w_act, params.b_act)
    verb = add(affine(f, params.w_verb, params.b_verb), matmul(act, params.bias_verb))
    noun = add(affine(f, params.w_noun, params.b_noun), matmul(act, params.bias_noun))
    if squeeze:
        verb, noun, act = (reshape(t, (t.shape[1],)) for t in (verb, noun, act))
    return ScoreTriple(verb=verb, noun=noun, action=act)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    squeeze = logits.ndim == 1
    lg = reshape(logits, (1, -1)) if squeeze else logits
    idx = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= lg.shape[1]:
        raise ValidationError(f"label outside class range [0, {lg.shape[1]})")
    return mean_all(subtract(logsumexp_rows(lg), take_rows(lg, idx)))


def multi_task_loss(
    scores: ScoreTriple,
    labels: tuple,
    tasks: Sequence[str] = ("verb", "noun", "action"),
) -> Tensor:
    """Equal-weight sum of the per-task cross-entropies.

    ``labels`` is (verb_ids, noun_ids, action_ids); for batched scores each
    entry is an integer array, otherwise a single id. ``tasks`` restricts
    the sum (the flow stream pretrains on verbs alone).
    """
    by_name = dict(zip(("verb", "noun", "action"), labels))
    total = None
    for t in tasks:
        if t not in by_name:
            raise ValidationError(f"unknown task '{t}'")
        term = cross_entropy(scores.task(t), by_name[t])
        total = term if total is None else add(total, term)
    if total is None:
        raise ValidationError("multi_task_loss needs at least one task")
    return total
