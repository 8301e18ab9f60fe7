"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import DeterminismError, TapeError
from .tensor import Tape, Tensor

Forward = Callable[[Mapping[str, Tensor]], Tensor]


@dataclass
class GradEntry:
    name: str
    max_abs_error: float
    max_rel_error: float
    passed: bool


@dataclass
class GradReport:
    """Per-parameter comparison of tape gradients against central differences.

    ``max_rel_error`` uses a unit floor, |a - n| / max(1, |a|, |n|), so
    coordinates whose true gradient is near zero are compared absolutely
    instead of amplifying finite-difference rounding noise.
    """

    entries: list[GradEntry]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = []
        for e in self.entries:
            status = "ok" if e.passed else "FAIL"
            lines.append(
                f"{e.name}: max_abs={e.max_abs_error:.3e} max_rel={e.max_rel_error:.3e} [{status}]"
            )
        return "\n".join(lines)


def _eval_scalar(forward: Forward, params: Mapping[str, Tensor]) -> float:
    out = forward(params)
    if out.size != 1:
        raise TapeError(f"grad_check forward must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(()))


def grad_check(
    forward: Forward,
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradReport:
    """Compare tape gradients of ``forward`` against central differences.

    ``forward`` maps named parameter tensors to a scalar tensor and must be
    deterministic (dropout disabled); this is verified by evaluating the
    baseline twice and comparing bitwise.
    """
    frozen = {name: Tensor(p.data) for name, p in params.items()}
    base = _eval_scalar(forward, frozen)
    if _eval_scalar(forward, frozen) != base:
        raise DeterminismError("grad_check forward is not deterministic between evaluations")

    live = {name: Tensor(p.data, grad_enabled=True) for name, p in params.items()}
    with Tape() as tape:
        loss = forward(live)
    grads = tape.backward(loss)

    entries = []
    for name, p in params.items():
        analytic = grads.get(live[name].uid)
        a = analytic.data if analytic is not None else np.zeros(p.shape)
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.shape[0])
        for i in range(flat.shape[0]):
            plus = flat.copy()
            plus[i] += eps
            minus = flat.copy()
            minus[i] -= eps
            trial = dict(frozen)
            trial[name] = Tensor(plus.reshape(p.shape))
            f_plus = _eval_scalar(forward, trial)
            trial[name] = Tensor(minus.reshape(p.shape))
            f_minus = _eval_scalar(forward, trial)
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)
        a_flat = a.reshape(-1)
        abs_err = np.abs(a_flat - numeric)
        denom = np.maximum(1.0, np.maximum(np.abs(a_flat), np.abs(numeric)))
        rel_err = abs_err / denom
        max_abs = float(abs_err.max(initial=0.0))
        max_rel = float(rel_err.max(initial=0.0))
        entries.append(GradEntry(name, max_abs, max_rel, max_rel <= tol))
    return GradReport(entries, tol)
