"""Expert-scoring functions and winner selection for update routing.

Scores are computed from the current-step moment estimates exactly as
tracked (no bias correction), summed entrywise across all of an expert's
parameter matrices.  EPD estimates the per-parameter first-order loss drop
of the step the optimizer would take and therefore scales with both the
learning rate and the gradient magnitude; PFN is the scale-invariant
root-mean-square of the preconditioned direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import math

import numpy as np

from .errors import ContractError, NumericError


@dataclass(frozen=True)
class ScoreRecord:
    expert_index: int
    score: float
    n_params: int
    lr_used: float


def _preconditioned_ratio(m: np.ndarray, v: np.ndarray, eps: float) -> np.ndarray:
    """m / (sqrt(v) + eps) with the 0/0 case (all-zero moments, eps=0) defined as 0."""
    den = np.sqrt(v) + eps
    out = np.zeros_like(m)
    nz = den > 0.0
    out[nz] = m[nz] / den[nz]
    return out


def epd_score(state, lr_now: float, eps: float) -> float:
    """Expected preconditioned descent per parameter: (lr/N) * sum m^2/(sqrt(v)+eps)."""
    total = 0.0
    for m, v in zip(state.m, state.v):
        total += float(np.sum(m * _preconditioned_ratio(m, v, eps)))
    return lr_now * total / state.n_params


def pfn_score(state, eps: float) -> float:
    """Preconditioned Frobenius norm: rms of m/(sqrt(v)+eps) over the expert."""
    total = 0.0
    for m, v in zip(state.m, state.v):
        r = _preconditioned_ratio(m, v, eps)
        total += float(np.sum(r * r))
    return math.sqrt(total) / math.sqrt(state.n_params)


def predicted_loss_drop(state, lr_now: float, eps: float) -> float:
    """First-order predicted loss decrease of this expert's step: N * epd_score."""
    return state.n_params * epd_score(state, lr_now, eps)


def select_winners(scores: Sequence[ScoreRecord], k: int) -> list[int]:
    """Indices of the k largest scores, ties broken toward the lower index."""
    if k <= 0:
        raise ContractError(f"k must be >= 1, got {k}")
    if k > len(scores):
        raise ContractError(f"k={k} exceeds the {len(scores)} scored experts")
    for rec in scores:
        if not np.isfinite(rec.score):
            raise NumericError(f"expert {rec.expert_index}: non-finite score {rec.score}")
    ranked = sorted(scores, key=lambda r: (-r.score, r.expert_index))
    return [r.expert_index for r in ranked[:k]]
