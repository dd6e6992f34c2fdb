"""Learning-rate schedules: linear warmup into cosine or linear decay."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractError

COSINE = "cosine"
LINEAR = "linear"


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str
    total_steps: int
    warmup_ratio: float = 0.05

    def __post_init__(self):
        if self.kind not in (COSINE, LINEAR):
            raise ContractError(f"schedule kind must be cosine|linear, got {self.kind!r}")
        if self.total_steps < 1:
            raise ContractError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ContractError(
                f"warmup_ratio must be in [0, 1], got {self.warmup_ratio}"
            )

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_ratio * self.total_steps))


def lr_at(spec: ScheduleSpec, step: int) -> float:
    """Schedule multiplier at a step: 0 -> 1 over warmup, then decay to 0.

    Steps beyond ``total_steps`` clamp to the final value.
    """
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    step = min(step, spec.total_steps)
    w = spec.warmup_steps
    if step < w:
        return step / w
    span = spec.total_steps - w
    progress = (step - w) / span if span > 0 else 1.0
    if spec.kind == COSINE:
        return 0.5 * (1.0 + math.cos(math.pi * progress))
    return 1.0 - progress
