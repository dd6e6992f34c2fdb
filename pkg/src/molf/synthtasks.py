"""Synthetic regression tasks with prescribed singular spectra.

Each task hides an optimal update delta_star = U diag(sigma) V^T behind a
fixed base weight.  Inputs are whitened gaussians, so the empirical loss
(half mean squared residual per column) has the closed-form population
analogue 0.5 * ||W_star - W_hat||_F^2, and the Eckart-Young tail energy
sum_{i>r} sigma_i^2 is an analytic floor for any rank-r student.

Regimes: ``heavy_tail`` (sigma_i = i^-p, slowly decaying, low-rank students
hit a large floor) and ``concentrated`` (sigma_i = 1 for i <= rank, else 0,
fully capturable at that rank); ``custom`` takes an explicit spectrum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ContractError, NumericError
from .rng import Rng

HEAVY_TAIL = "heavy_tail"
CONCENTRATED = "concentrated"
CUSTOM = "custom"

_ORTHO_TOL = 1e-10


@dataclass
class SpectralTask:
    d_out: int
    d_in: int
    w_base: np.ndarray
    delta_star: np.ndarray
    spectrum: np.ndarray          # descending, length min(d_out, d_in)
    regime: str
    noise_std: float = 0.0

    @property
    def w_star(self) -> np.ndarray:
        return self.w_base + self.delta_star


def _orthonormal_factor(rng: Rng, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.gaussian_matrix(rows, cols))
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    q = q * signs
    gram = q.T @ q
    if float(np.abs(gram - np.eye(cols)).max()) > _ORTHO_TOL:
        raise NumericError("orthonormal factor failed the Gram check")
    return q


def gen_spectral_target(d_out: int, d_in: int, regime: str, rng: Rng, *,
                        power: float = 0.1, rank: int = 8,
                        spectrum=None, noise_std: float = 0.0,
                        w_base: np.ndarray | None = None,
                        w_base_std: float | None = None) -> SpectralTask:
    """Build a task whose optimal update has the requested singular spectrum."""
    if d_out < 1 or d_in < 1:
        raise ContractError(f"dims must be positive, got {d_out} x {d_in}")
    n = min(d_out, d_in)
    if regime == HEAVY_TAIL:
        if power < 0:
            raise ContractError(f"heavy_tail power must be >= 0, got {power}")
        sigma = np.arange(1, n + 1, dtype=np.float64) ** (-power)
    elif regime == CONCENTRATED:
        if not 1 <= rank <= n:
            raise ContractError(
                f"concentrated rank must be in [1, {n}], got {rank}"
            )
        sigma = np.zeros(n)
        sigma[:rank] = 1.0
    elif regime == CUSTOM:
        if spectrum is None:
            raise ContractError("custom regime requires an explicit spectrum")
        sigma = np.asarray(spectrum, dtype=np.float64).ravel()
        if sigma.size > n:
            raise ContractError(f"spectrum has {sigma.size} values, max is {n}")
        if (sigma < 0).any() or (np.diff(sigma) > 0).any():
            raise ContractError("spectrum must be non-negative and descending")
        sigma = np.concatenate([sigma, np.zeros(n - sigma.size)])
    else:
        raise ContractError(f"unknown regime {regime!r}")

    u = _orthonormal_factor(rng, d_out, n)
    v = _orthonormal_factor(rng, d_in, n)
    delta = nm.matmul(u * sigma, v.T)
    if w_base is None:
        std = w_base_std if w_base_std is not None else 1.0 / math.sqrt(d_in)
        w_base = rng.gaussian_matrix(d_out, d_in) * std
    else:
        w_base = nm.as_matrix(w_base, "task w_base")
        if w_base.shape != (d_out, d_in):
            raise ContractError(
                f"w_base shape {w_base.shape} != ({d_out}, {d_in})"
            )
    return SpectralTask(d_out, d_in, w_base, delta, sigma, regime, float(noise_std))


def tail_energy(spectrum, r: int) -> float:
    """Energy beyond rank r: sum of the squared singular values past the first r."""
    if r < 0:
        raise ContractError(f"rank must be >= 0, got {r}")
    sigma = np.asarray(spectrum, dtype=np.float64).ravel()
    if (np.diff(sigma) > 0).any():
        raise ContractError("spectrum must be descending")
    if r >= sigma.size:
        return 0.0
    tail = sigma[r:]
    return float(np.sum(tail * tail))


def sample_batch(task: SpectralTask, batch: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Whitened inputs X ~ N(0, I) and labels Y = W_star X (+ gaussian noise)."""
    if batch < 1:
        raise ContractError(f"batch must be >= 1, got {batch}")
    x = rng.gaussian_matrix(task.d_in, batch)
    y = nm.matmul(task.w_star, x)
    if task.noise_std > 0.0:
        y = y + task.noise_std * rng.gaussian_matrix(task.d_out, batch)
    return x, y


def population_loss(task: SpectralTask, w_eff: np.ndarray,
                    bias: np.ndarray | None = None) -> float:
    """Closed-form excess loss 0.5*(||W_star - W_eff||_F^2 + ||bias||^2).

    The irreducible label-noise constant (0.5 * noise_std^2 * d_out) is not
    included; on noiseless tasks this is the exact population loss.
    """
    diff = task.w_star - nm.as_matrix(w_eff, "student weight")
    total = float(np.sum(diff * diff))
    if bias is not None:
        total += float(np.sum(bias * bias))
    return 0.5 * total
