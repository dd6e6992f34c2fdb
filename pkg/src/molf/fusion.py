"""Post-training fusion of LoRA experts into the base weight, plus a verifier.

Because the forward pass is an ungated superposition, the multi-expert
module collapses exactly: W_final = W_base + sum_i (alpha_i/sqrt(r_i)) B_i A_i.
``verify_fusion`` probes random inputs and reports the worst relative
deviation between the superposed and the fused forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ContractError
from .model import MoLFModule
from .numerics import check_finite
from .rng import Rng


def fuse(module: MoLFModule, *, collapse: bool = False) -> np.ndarray:
    """Collapsed weight of a module; non-destructive unless ``collapse`` is set.

    With ``collapse=True`` the module is rewritten in place: the base weight
    becomes the fused weight, the expert list empties, and the module turns
    into a plain trainable dense layer.
    """
    w = module.w_base.copy()
    for e in module.experts:
        w += e.scaling * nm.matmul(e.b, e.a)
    check_finite(w, f"{module.name}: fused weight")
    if collapse:
        module.w_base[...] = w
        module.experts.clear()
        module.base_trainable = True
    return w


@dataclass(frozen=True)
class FusionReport:
    module: str
    probes: int
    tol: float
    max_rel_deviation: float

    @property
    def passed(self) -> bool:
        return self.max_rel_deviation <= self.tol


def verify_fusion(module: MoLFModule, probes: int, rng: Rng, tol: float,
                  training: bool = False) -> FusionReport:
    """Compare superposed vs. fused forward on random probes (inference mode only)."""
    if training:
        raise ContractError(
            f"{module.name}: fusion equivalence is undefined under active dropout"
        )
    if tol <= 0:
        raise ContractError(f"tol must be > 0, got {tol}")
    if probes < 1:
        raise ContractError(f"probes must be >= 1, got {probes}")
    w_final = fuse(module)
    worst = 0.0
    for _ in range(probes):
        x = rng.gaussian_matrix(module.d_in, 1)
        y_sup = module.apply(x, training=False)
        y_fus = nm.matmul(w_final, x)
        if module.bias is not None:
            y_fus = y_fus + module.bias
        num = float(np.linalg.norm(y_sup - y_fus))
        if num == 0.0:
            continue
        den = float(np.linalg.norm(y_fus))
        rel = num / den if den > 0.0 else float("inf")
        worst = max(worst, rel)
    return FusionReport(module.name, probes, tol, worst)
