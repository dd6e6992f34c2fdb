"""Three-phase sparse AdamW: track everywhere, score, update the Top-K.

Phase 1 updates first/second moment EMAs and the shared step counter for
*every* expert of every module, winners and losers alike, so dormant
experts keep a mature, correctly debiased moment state.  Phase 2 scores all
experts (EPD or PFN).  Phase 3 applies the decoupled-weight-decay AdamW
update to the Top-K scorers only; losing experts keep their parameters
bitwise unchanged.  ``dense`` scoring updates everyone but still records
EPD scores for the routing trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import backend
from .errors import ContractError, NumericError
from .model import FFT, LORA, MLPNetwork, PathwayRef
from .schedule import ScheduleSpec, lr_at
from .scoring import ScoreRecord, epd_score, pfn_score, select_winners

EPD = "epd"
PFN = "pfn"
DENSE = "dense"


@dataclass
class OptimizerConfig:
    lr_fft: float = 1e-3
    lr_lora: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k_top: int = 1
    lambda_fft: float = 0.1
    lambda_lora: float = 0.01
    scoring: str = EPD
    schedule: ScheduleSpec = field(default_factory=lambda: ScheduleSpec("cosine", 1000))
    grad_clip: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError("beta1 and beta2 must lie in [0, 1)")
        if self.eps <= 0:
            raise ContractError(f"eps must be > 0, got {self.eps}")
        if self.k_top < 1:
            raise ContractError(f"k_top must be >= 1, got {self.k_top}")
        if self.scoring not in (EPD, PFN, DENSE):
            raise ContractError(f"scoring must be epd|pfn|dense, got {self.scoring!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ContractError("grad_clip must be > 0 when set")


@dataclass
class ExpertState:
    """Per-expert optimizer state; ``params`` are live references into the model."""

    kind: str
    param_names: tuple[str, ...]
    params: tuple[np.ndarray, ...]
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int
    n_params: int
    lr_base: float
    weight_decay: float

    @classmethod
    def for_pathway(cls, pw: PathwayRef, cfg: OptimizerConfig) -> "ExpertState":
        lr = cfg.lr_fft if pw.kind == FFT else cfg.lr_lora
        wd = cfg.lambda_fft if pw.kind == FFT else cfg.lambda_lora
        return cls(
            kind=pw.kind,
            param_names=pw.names,
            params=pw.arrays,
            m=[np.zeros_like(p) for p in pw.arrays],
            v=[np.zeros_like(p) for p in pw.arrays],
            t=0,
            n_params=pw.n_params,
            lr_base=lr,
            weight_decay=wd,
        )


@dataclass(frozen=True)
class RoutingDecision:
    """Per-(step, module) routing record: all scores, the winners, the rates used."""

    step: int
    module: str
    scores: tuple[float, ...]
    winners: tuple[int, ...]
    lr_used: tuple[float, ...]
    mode: str


def track_moments(state: ExpertState, grads: Sequence[np.ndarray],
                  cfg: OptimizerConfig) -> None:
    """Phase 1 for one expert: EMA the moments, bump t, leave parameters alone."""
    if len(grads) != len(state.params):
        raise ContractError(
            f"{state.param_names[0]}: got {len(grads)} gradients for "
            f"{len(state.params)} parameters"
        )
    for name, p, g in zip(state.param_names, state.params, grads):
        if g.shape != p.shape:
            raise ContractError(
                f"{name}: gradient shape {g.shape} != parameter shape {p.shape}"
            )
        if not np.isfinite(g).all():
            raise NumericError(f"{name}: non-finite gradient entries")
    for m, v, g in zip(state.m, state.v, grads):
        backend.ema_update(m, v, g, cfg.beta1, cfg.beta2)
    state.t += 1


def apply_topk_update(module_states: Sequence[ExpertState], winners: Sequence[int],
                      lr_now: Sequence[float], cfg: OptimizerConfig) -> None:
    """Phase 3: AdamW with decoupled decay on winners; losers stay bitwise put."""
    seen = set()
    for i in winners:
        if not 0 <= i < len(module_states):
            raise ContractError(
                f"winner index {i} out of range for {len(module_states)} experts"
            )
        if i in seen:
            raise ContractError(f"duplicate winner index {i}")
        seen.add(i)
    for i in winners:
        st = module_states[i]
        lr = lr_now[i]
        bc1 = 1.0 - cfg.beta1 ** st.t
        bc2 = 1.0 - cfg.beta2 ** st.t
        decay = 1.0 - lr * st.weight_decay
        step_size = lr / bc1
        for theta, m, v in zip(st.params, st.m, st.v):
            backend.adamw_update(theta, m, v, decay, step_size, bc2, cfg.eps)


def _clip_grads(grads: Sequence[np.ndarray], clip: float) -> list[np.ndarray]:
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm <= clip:
        return list(grads)
    factor = clip / norm
    return [g * factor for g in grads]


class MoLFOptimizer:
    """Owns the per-module expert states and runs the three phases each step."""

    def __init__(self, network: MLPNetwork, cfg: OptimizerConfig):
        self.network = network
        self.cfg = cfg
        self.states: dict[str, list[ExpertState]] = {}
        for mod in network.modules:
            pathways = mod.pathways()
            if cfg.scoring != DENSE and cfg.k_top > len(pathways):
                raise ContractError(
                    f"{mod.name}: k_top={cfg.k_top} exceeds {len(pathways)} routable experts"
                )
            self.states[mod.name] = [ExpertState.for_pathway(pw, cfg) for pw in pathways]

    def step(self, grads: dict[str, list[list[np.ndarray]]],
             step_index: int) -> list[RoutingDecision]:
        """One optimizer step over all modules; returns one decision per module.

        ``grads`` maps module name to per-expert gradient lists aligned with
        the module's pathway order; every expert must carry full-batch
        gradients (there is no token gating to shield losers from Phase 1).
        """
        cfg = self.cfg
        mult = lr_at(cfg.schedule, step_index)
        decisions: list[RoutingDecision] = []
        for mod in self.network.modules:
            states = self.states[mod.name]
            try:
                mod_grads = grads[mod.name]
            except KeyError:
                raise ContractError(f"{mod.name}: no gradients supplied") from None
            if len(mod_grads) != len(states):
                raise ContractError(
                    f"{mod.name}: got gradients for {len(mod_grads)} experts, "
                    f"expected {len(states)}"
                )
            try:
                for st, g in zip(states, mod_grads):
                    if cfg.grad_clip is not None:
                        g = _clip_grads(g, cfg.grad_clip)
                    track_moments(st, g, cfg)
                lr_now = [st.lr_base * mult for st in states]
                records = []
                for i, st in enumerate(states):
                    if cfg.scoring == PFN:
                        s = pfn_score(st, cfg.eps)
                    else:  # EPD, and DENSE records EPD for the trace
                        s = epd_score(st, lr_now[i], cfg.eps)
                    records.append(ScoreRecord(i, s, st.n_params, lr_now[i]))
                if cfg.scoring == DENSE:
                    winners = list(range(len(states)))
                else:
                    winners = select_winners(records, cfg.k_top)
                apply_topk_update(states, winners, lr_now, cfg)
            except (ContractError, NumericError) as exc:
                raise type(exc)(f"[module {mod.name}] {exc}") from exc
            decisions.append(RoutingDecision(
                step=step_index,
                module=mod.name,
                scores=tuple(r.score for r in records),
                winners=tuple(winners),
                lr_used=tuple(lr_now),
                mode=cfg.scoring,
            ))
        return decisions
