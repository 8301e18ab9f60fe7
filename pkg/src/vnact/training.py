"""Stage schedules, optimizers, frame sampling, augmentation and the
training/evaluation loops.

Preset schedules carry the reference training recipes verbatim and are
immutable; desk-scale runs derive from them with explicit overrides
(epoch counts, clip lengths, batch sizes) without touching the preset
definitions. All loops are deterministic functions of their seed: batch
order, temporal jitter, augmentation draws and dropout masks all come
from one per-stage generator consumed in a fixed order.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, ValidationError
from .heads import ScoreTriple, multi_task_loss
from .init import rng_for
from .scores import ScoreTable
from .tensor import Tape, Tensor


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class StageSchedule:
    """One training stage: duration, learning-rate plan, optimizer, scope."""

    name: str
    epochs: int
    base_lr: float
    decay_epochs: tuple
    decay_factor: float
    optimizer: str
    dropout_p: float
    batch_size: int
    frames_T: int
    trainable_groups: tuple
    loss_tasks: tuple = ("verb", "noun", "action")
    per_epoch_decay: Optional[float] = None
    sgd_momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError(f"epochs must be nonnegative, got {self.epochs}")
        if self.base_lr <= 0:
            raise ValidationError(f"base_lr must be positive, got {self.base_lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"optimizer must be adam or sgd, got '{self.optimizer}'")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.batch_size < 1 or self.frames_T < 1:
            raise ValidationError("batch_size and frames_T must be positive")
        d = tuple(self.decay_epochs)
        if any(d[i] >= d[i + 1] for i in range(len(d) - 1)):
            raise ValidationError(f"decay_epochs must be strictly increasing, got {d}")
        if d and (d[0] < 1 or d[-1] >= self.epochs):
            raise ValidationError(f"decay_epochs must lie in [1, {self.epochs}), got {d}")
        if self.per_epoch_decay is not None:
            if not 0.0 < self.per_epoch_decay <= 1.0:
                raise ValidationError(f"per_epoch_decay must be in (0, 1], got {self.per_epoch_decay}")
            if d:
                raise ValidationError("per-epoch decay and stepped decay are mutually exclusive")
        elif not 0.0 < self.decay_factor <= 1.0:
            raise ValidationError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if not self.trainable_groups:
            raise ValidationError("at least one trainable group is required")


_MOTION_GROUPS = ("backbone", "backbone_last_stage", "motion_attn", "convlstm", "heads")

PRESETS: Dict[str, StageSchedule] = {
    "lsta_stage1": StageSchedule(
        name="lsta_stage1", epochs=200, base_lr=1e-3, decay_epochs=(25, 75, 150),
        decay_factor=0.1, optimizer="adam", dropout_p=0.7, batch_size=32, frames_T=20,
        trainable_groups=("heads", "lsta", "grus")),
    "lsta_stage2": StageSchedule(
        name="lsta_stage2", epochs=150, base_lr=1e-4, decay_epochs=(25, 75),
        decay_factor=0.1, optimizer="adam", dropout_p=0.7, batch_size=32, frames_T=20,
        trainable_groups=("heads", "lsta", "grus", "backbone_last_stage")),
    "hf_tsn": StageSchedule(
        name="hf_tsn", epochs=120, base_lr=0.01, decay_epochs=(50, 100),
        decay_factor=0.1, optimizer="sgd", dropout_p=0.5, batch_size=32, frames_T=16,
        trainable_groups=("backbone", "backbone_last_stage", "hf", "heads")),
    "flow_pretrain": StageSchedule(
        name="flow_pretrain", epochs=700, base_lr=0.01, decay_epochs=(75, 150, 250, 500),
        decay_factor=0.5, optimizer="sgd", dropout_p=0.7, batch_size=32, frames_T=20,
        trainable_groups=_MOTION_GROUPS, loss_tasks=("verb",)),
    "flow_stage2": StageSchedule(
        name="flow_stage2", epochs=500, base_lr=0.01, decay_epochs=(50, 100),
        decay_factor=0.5, optimizer="sgd", dropout_p=0.7, batch_size=32, frames_T=20,
        trainable_groups=_MOTION_GROUPS),
    "two_stream": StageSchedule(
        name="two_stream", epochs=100, base_lr=0.01, decay_epochs=(),
        decay_factor=1.0, optimizer="adam", dropout_p=0.7, batch_size=32, frames_T=20,
        trainable_groups=("heads", "lsta", "convlstm", "backbone_last_stage", "fusion"),
        per_epoch_decay=0.99),
}


def apply_overrides(schedule: StageSchedule, overrides: Dict) -> StageSchedule:
    """Derive a schedule from a preset; unknown keys are rejected.

    Shrinking ``epochs`` without naming ``decay_epochs`` drops decay
    points at or past the new end — they could never fire, and keeping
    them would violate the decay_epochs < epochs invariant.
    """
    fields = {f.name for f in dataclasses.fields(StageSchedule)}
    bad = set(overrides) - (fields - {"name"})
    if bad:
        raise ValidationError(f"unknown schedule overrides {sorted(bad)}")
    fixed = dict(overrides)
    for key in ("decay_epochs", "trainable_groups", "loss_tasks"):
        if key in fixed:
            fixed[key] = tuple(fixed[key])
    if "epochs" in fixed and "decay_epochs" not in fixed:
        kept = tuple(d for d in schedule.decay_epochs if d < fixed["epochs"])
        if kept != schedule.decay_epochs:
            fixed["decay_epochs"] = kept
    return dataclasses.replace(schedule, **fixed)


def lr_at(s: StageSchedule, epoch: int) -> float:
    """Learning rate of a 1-based epoch; rate decays after each decay epoch."""
    if not 1 <= epoch <= s.epochs:
        raise ValidationError(f"epoch {epoch} outside [1, {s.epochs}]")
    if s.per_epoch_decay is not None:
        return s.base_lr * s.per_epoch_decay ** (epoch - 1)
    elapsed = sum(1 for d in s.decay_epochs if d < epoch)
    return s.base_lr * s.decay_factor ** elapsed


# ---------------------------------------------------------------------------
# frame sampling and augmentation


def sample_frames(n_available: int, t: int, mode: str = "eval",
                  rng: Optional[np.random.Generator] = None) -> List[int]:
    """Split [0, n) into t equal segments; pick each segment's center
    (eval) or a uniform random frame within it (train). Indices are
    nondecreasing; duplicates appear when fewer frames than segments."""
    if t < 1:
        raise ValidationError(f"segment count must be positive, got {t}")
    if n_available < 1:
        raise ValidationError(f"need at least one frame, got {n_available}")
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be train or eval, got '{mode}'")
    if mode == "train" and rng is None:
        raise ValidationError("train-mode sampling requires an rng")
    out = []
    for i in range(t):
        lo = i * n_available / t
        hi = (i + 1) * n_available / t
        if mode == "eval":
            out.append(int(np.floor((lo + hi) / 2.0)))
        else:
            first = int(np.floor(lo))
            last = max(first, int(np.ceil(hi)) - 1)
            out.append(int(rng.integers(first, last + 1)))
    return out


@dataclass(frozen=True)
class AugmentationConfig:
    """Train-time randomization: scale jitter, horizontal flips, temporal jitter."""

    scale_jitter: Optional[tuple] = None  # (lo, hi) fractions of the frame extent
    horizontal_flip: float = 0.5
    temporal_jitter: bool = True

    def __post_init__(self):
        if not 0.0 <= self.horizontal_flip <= 1.0:
            raise ValidationError(f"flip probability must be in [0, 1], got {self.horizontal_flip}")
        if self.scale_jitter is not None:
            lo, hi = self.scale_jitter
            if not 0.0 < lo <= hi <= 1.0:
                raise ValidationError(f"scale_jitter must satisfy 0 < lo <= hi <= 1, got {self.scale_jitter}")


def bilinear_resize(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize the trailing (H, W) plane by corner-aligned bilinear interpolation."""
    h, w = arr.shape[-2:]
    ys = np.linspace(0.0, h - 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, width) if width > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = arr[..., y0[:, None], x0[None, :]]
    b = arr[..., y0[:, None], x1[None, :]]
    c = arr[..., y1[:, None], x0[None, :]]
    d = arr[..., y1[:, None], x1[None, :]]
    top = a * (1 - fx) + b * fx
    bot = c * (1 - fx) + d * fx
    return top * (1 - fy) + bot * fy


def augment_clip(clip: np.ndarray, aug: AugmentationConfig, rng: np.random.Generator,
                 flip: Optional[bool] = None) -> np.ndarray:
    """Apply scale jitter and horizontal flip to one clip (T, C, H, W).

    The flip decision can be passed in so paired modalities of one sample
    share it.
    """
    out = clip
    if aug.scale_jitter is not None:
        lo, hi = aug.scale_jitter
        h, w = out.shape[-2:]
        s = rng.uniform(lo, hi)
        ch = max(1, int(round(h * s)))
        cw = max(1, int(round(w * s)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        out = bilinear_resize(out[..., top:top + ch, left:left + cw], h, w)
    if flip is None:
        flip = bool(rng.random() < aug.horizontal_flip)
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class CropSpec:
    """Evaluation view plan: ten corner/center crops with flips, or center only."""

    mode: str

    def __post_init__(self):
        if self.mode not in ("lsta_10view", "tsn_10crop", "center"):
            raise ValidationError(f"unknown crop mode '{self.mode}'")

    @property
    def view_count(self) -> int:
        return 1 if self.mode == "center" else 10


def eval_multiview(frame: np.ndarray, spec: CropSpec, crop_size: int) -> List[np.ndarray]:
    """Deterministic evaluation views of (..., H, W): four corner crops and the
    center crop, in TL, TR, BL, BR, center order, then the same five flipped."""
    h, w = frame.shape[-2:]
    if crop_size > min(h, w):
        raise ValidationError(f"crop {crop_size} larger than frame {h}x{w}")
    c = crop_size
    anchors = [(0, 0), (0, w - c), (h - c, 0), (h - c, w - c), ((h - c) // 2, (w - c) // 2)]
    if spec.mode == "center":
        anchors = anchors[-1:]
    crops = [np.ascontiguousarray(frame[..., top:top + c, left:left + c]) for top, left in anchors]
    if spec.mode == "center":
        return crops
    return crops + [np.ascontiguousarray(v[..., ::-1]) for v in crops]


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    """Slot buffers (momenta, moments) plus the shared step counter."""

    kind: str
    step: int = 0
    slots: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)


def optimizer_step(
    kind: str,
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    lr: float,
    state: Optional[OptimizerState] = None,
    trainable: Optional[set] = None,
    momentum: float = 0.9,
):
    """One update over the trainable subset; untouched entries keep their
    exact Tensor objects. Returns (new params, state)."""
    if kind not in ("adam", "sgd"):
        raise ValidationError(f"optimizer must be adam or sgd, got '{kind}'")
    if state is None:
        state = OptimizerState(kind=kind)
    if state.kind != kind:
        raise ValidationError(f"optimizer state is for '{state.kind}', not '{kind}'")
    state.step += 1
    t = state.step
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    new = dict(params)
    for name in sorted(grads):
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter '{name}'")
        if trainable is not None and name not in trainable:
            continue
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} mismatches parameter '{name}' {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for '{name}'")
        slot = state.slots.setdefault(name, {})
        if kind == "adam":
            m = slot.setdefault("m", np.zeros(p.shape))
            v = slot.setdefault("v", np.zeros(p.shape))
            m[...] = beta1 * m + (1 - beta1) * g
            v[...] = beta2 * v + (1 - beta2) * g * g
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            upd = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        else:
            vel = slot.setdefault("v", np.zeros(p.shape))
            vel[...] = momentum * vel + g
            upd = p.data - lr * vel
        if not np.isfinite(upd).all():
            raise NonFiniteError(f"non-finite update for '{name}'")
        new[name] = Tensor(upd, grad_enabled=True)
    return new, state


# ---------------------------------------------------------------------------
# evaluation and the stage loop


def _gather_frames(arr: np.ndarray, t: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Per-sample temporal sampling of (B, T_data, C, H, W) down to t frames."""
    b, t_data = arr.shape[:2]
    if rng is None:
        idx = np.asarray(sample_frames(t_data, t), dtype=np.int64)
        return arr[:, idx]
    rows = np.stack([np.asarray(sample_frames(t_data, t, "train", rng), dtype=np.int64)
                     for _ in range(b)])
    return np.take_along_axis(arr, rows[:, :, None, None, None], axis=1)


def _prepare_batch(inputs: Dict[str, np.ndarray], frames_t: int,
                   aug: Optional[AugmentationConfig], rng: Optional[np.random.Generator]):
    jitter_rng = rng if (aug is None or aug.temporal_jitter) else None
    sampled = {k: _gather_frames(v, frames_t, jitter_rng) for k, v in inputs.items()}
    if aug is None or rng is None:
        return sampled
    keys = sorted(sampled)
    b = sampled[keys[0]].shape[0]
    out = {k: np.empty_like(sampled[k]) for k in keys}
    for i in range(b):
        flip = bool(rng.random() < aug.horizontal_flip)
        for k in keys:
            out[k][i] = augment_clip(sampled[k][i], aug, rng, flip=flip)
    return out


def evaluate(model, dataset, frames_t: Optional[int] = None, batch_size: int = 32,
             crop: Optional[CropSpec] = None, crop_size: Optional[int] = None) -> ScoreTable:
    """Deterministic scoring of a dataset into a ScoreTable.

    Frames are center-sampled down to ``frames_t``; with a CropSpec the
    per-view score triples are averaged in the documented view order.
    """
    if crop is not None and crop_size is None:
        raise ValidationError("crop evaluation requires crop_size")
    table = ScoreTable(split=dataset.split_tag, label_space_hash=dataset.space.space_hash())
    n = len(dataset)
    for start in range(0, n, batch_size):
        idx = list(range(start, min(n, start + batch_size)))
        inputs, _ = dataset.batch(idx)
        t_target = frames_t or next(iter(inputs.values())).shape[1]
        sampled = {k: _gather_frames(v, t_target, None) for k, v in inputs.items()}
        if crop is None:
            triple = model.forward(sampled, train=False).detached()
        else:
            views = {k: eval_multiview(v, crop, crop_size) for k, v in sampled.items()}
            count = len(next(iter(views.values())))
            acc = None
            for vi in range(count):
                one = model.forward({k: views[k][vi] for k in views}, train=False).detached()
                if acc is None:
                    acc = one
                else:
                    acc = ScoreTriple(acc.verb + one.verb, acc.noun + one.noun,
                                      acc.action + one.action)
            triple = ScoreTriple(acc.verb / count, acc.noun / count, acc.action / count)
        for row, seg in enumerate(dataset.segment_ids[start:start + len(idx)]):
            table.add(seg, ScoreTriple(triple.verb[row], triple.noun[row], triple.action[row]))
    return table


@dataclass
class TrainingLog:
    """Per-epoch rows of one stage run."""

    stage: str
    rows: List[Dict] = field(default_factory=list)

    COLUMNS = ("epoch", "lr", "train_loss", "train_acc_verb", "train_acc_noun",
               "train_acc_action", "eval_acc_verb", "eval_acc_noun", "eval_acc_action")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row.get(k, "") for k in self.COLUMNS})


def _batch_accuracy(triple: ScoreTriple, labels) -> tuple:
    out = []
    for logits, y in zip((triple.verb, triple.noun, triple.action), labels):
        pred = np.argmax(np.asarray(logits), axis=-1)
        out.append(float(np.mean(pred == np.asarray(y))))
    return tuple(out)


def _table_accuracy(table: ScoreTable, dataset) -> tuple:
    labels = dataset.labels_by_segment()
    hits = np.zeros(3)
    for seg in table.segments():
        triple = table.results[seg]
        for j, task in enumerate(("verb", "noun", "action")):
            if int(np.argmax(triple[task])) == labels[seg][j]:
                hits[j] += 1
    return tuple(hits / max(1, len(table.segments())))


def run_stage(
    model,
    dataset,
    schedule: StageSchedule,
    seed: int = 0,
    aug: Optional[AugmentationConfig] = None,
    eval_dataset=None,
    eval_every: int = 0,
) -> TrainingLog:
    """Run one schedule: epochs of shuffled minibatches through forward,
    multi-task loss, backward and the optimizer, updating only the
    schedule's trainable groups. Deterministic given (model, data, seed)."""
    missing = set(schedule.trainable_groups) - model.groups()
    if missing:
        raise ValidationError(f"model has no parameter groups {sorted(missing)}")
    trainable = {n for n in model.params() if model.group_of(n) in set(schedule.trainable_groups)}
    rng = rng_for(seed, f"stage:{schedule.name}")
    state: Optional[OptimizerState] = None
    log = TrainingLog(stage=schedule.name)
    n = len(dataset)
    for epoch in range(1, schedule.epochs + 1):
        lr = lr_at(schedule, epoch)
        order = rng.permutation(n)
        loss_sum = 0.0
        acc_sum = np.zeros(3)
        seen = 0
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            raw_inputs, labels = dataset.batch(idx)
            inputs = _prepare_batch(raw_inputs, schedule.frames_T, aug, rng)
            params = model.params()
            try:
                with Tape() as tape:
                    triple = model.forward(inputs, train=True, rng=rng,
                                           dropout_p=schedule.dropout_p)
                    loss = multi_task_loss(triple, labels, tasks=schedule.loss_tasks)
                    lval = loss.item()
                    if not np.isfinite(lval):
                        raise NonFiniteError("loss is non-finite")
                    grads_by_uid = tape.backward(loss)
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"stage {schedule.name} epoch {epoch} batch {start // schedule.batch_size}: {exc}"
                ) from exc
            grads = {name: grads_by_uid[params[name].uid].data
                     for name in trainable if params[name].uid in grads_by_uid}
            params, state = optimizer_step(schedule.optimizer, params, grads, lr, state,
                                           trainable=trainable, momentum=schedule.sgd_momentum)
            model.set_params(params)
            bs = len(idx)
            loss_sum += lval * bs
            acc_sum += np.asarray(_batch_accuracy(triple.detached(), labels)) * bs
            seen += bs
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / max(1, seen),
            "train_acc_verb": acc_sum[0] / max(1, seen),
            "train_acc_noun": acc_sum[1] / max(1, seen),
            "train_acc_action": acc_sum[2] / max(1, seen),
        }
        if eval_dataset is not None and eval_every and (
                epoch % eval_every == 0 or epoch == schedule.epochs):
            table = evaluate(model, eval_dataset, frames_t=schedule.frames_T,
                             batch_size=schedule.batch_size)
            ev, en, ea = _table_accuracy(table, eval_dataset)
            row.update(eval_acc_verb=ev, eval_acc_noun=en, eval_acc_action=ea)
        log.rows.append(row)
    return log
