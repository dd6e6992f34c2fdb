"""Hot numeric kernels with two interchangeable implementations.

Every kernel here exists twice: a numba ``@njit`` version and a pure-numpy
fallback.  The environment variable ``MOLF_BACKEND`` picks one at import
time (``numba`` is the default whenever numba imports; set
``MOLF_BACKEND=numpy`` to force the fallback).  ``set_backend`` switches at
runtime, which the test suite and the kernel benchmark use to compare the
two paths in-process.

Determinism contract: for each output element, ``matmul`` accumulates the
inner-dimension products strictly left to right in *both* backends, and the
elementwise optimizer kernels evaluate the same rounded operation sequence,
so the two implementations return bitwise-identical arrays.  The raw PRNG
stream (``fill_u64``) is integer arithmetic and exactly portable.
"""

from __future__ import annotations

import math
import os
import warnings

import numpy as np

from .errors import ConfigError

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

_U5 = np.uint64(5)
_U7 = np.uint64(7)
_U9 = np.uint64(9)
_U17 = np.uint64(17)
_U19 = np.uint64(19)
_U45 = np.uint64(45)
_U57 = np.uint64(57)
_MASK64 = (1 << 64) - 1


# --- pure-numpy implementations -------------------------------------------

def _matmul_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # rank-1 accumulation over the inner dimension keeps the per-element
    # summation order identical to the scalar loop in the numba kernel
    out = np.zeros((a.shape[0], b.shape[1]))
    for p in range(a.shape[1]):
        out += np.multiply.outer(a[:, p], b[p, :])
    return out


def _ema_update_numpy(m, v, g, beta1, c1, beta2, c2):
    m *= beta1
    m += c1 * g
    v *= beta2
    v += c2 * (g * g)


def _adamw_update_numpy(theta, m, v, decay, step_size, bc2, eps):
    denom = np.sqrt(v / bc2)
    denom += eps
    upd = m / denom
    upd *= step_size
    theta *= decay
    theta -= upd


def _fill_u64_numpy(state: np.ndarray, out: np.ndarray) -> None:
    # xoshiro256** step on python ints; wraps explicitly via the 64-bit mask
    s0, s1, s2, s3 = (int(x) for x in state)
    for idx in range(out.size):
        x = (s1 * 5) & _MASK64
        r = ((((x << 7) | (x >> 57)) & _MASK64) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        out[idx] = r
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


# --- numba implementations --------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _matmul_numba(a, b):  # pragma: no cover - compiled
        m, k = a.shape
        n = b.shape[1]
        out = np.zeros((m, n))
        for i in range(m):
            for p in range(k):
                aip = a[i, p]
                for j in range(n):
                    out[i, j] += aip * b[p, j]
        return out

    @njit(cache=True)
    def _ema_update_numba(m, v, g, beta1, c1, beta2, c2):  # pragma: no cover
        rows, cols = m.shape
        for i in range(rows):
            for j in range(cols):
                m[i, j] = beta1 * m[i, j] + c1 * g[i, j]
                v[i, j] = beta2 * v[i, j] + c2 * (g[i, j] * g[i, j])

    @njit(cache=True)
    def _adamw_update_numba(theta, m, v, decay, step_size, bc2, eps):  # pragma: no cover
        rows, cols = theta.shape
        for i in range(rows):
            for j in range(cols):
                d = math.sqrt(v[i, j] / bc2) + eps
                u = step_size * (m[i, j] / d)
                theta[i, j] = theta[i, j] * decay - u

    @njit(cache=True)
    def _fill_u64_numba(state, out):  # pragma: no cover - compiled
        s0 = state[0]
        s1 = state[1]
        s2 = state[2]
        s3 = state[3]
        for idx in range(out.size):
            x = s1 * _U5
            r = ((x << _U7) | (x >> _U57)) * _U9
            t = s1 << _U17
            s2 = s2 ^ s0
            s3 = s3 ^ s1
            s1 = s1 ^ s2
            s0 = s0 ^ s3
            s2 = s2 ^ t
            s3 = (s3 << _U45) | (s3 >> _U19)
            out[idx] = r
        state[0] = s0
        state[1] = s1
        state[2] = s2
        state[3] = s3


# --- dispatch ----------------------------------------------------------------

def _initial_backend() -> str:
    requested = os.environ.get("MOLF_BACKEND", "").strip().lower()
    if requested:
        if requested not in ("numba", "numpy"):
            raise ConfigError(
                f"MOLF_BACKEND must be 'numba' or 'numpy', got {requested!r}"
            )
        if requested == "numba" and not _HAVE_NUMBA:
            raise ConfigError("MOLF_BACKEND=numba but numba is not importable")
        return requested
    if _HAVE_NUMBA:
        return "numba"
    warnings.warn("numba unavailable; using pure-numpy kernel fallbacks (slower)")
    return "numpy"


_ACTIVE = _initial_backend()


def backend_name() -> str:
    """Name of the kernel implementation currently in use."""
    return _ACTIVE


def available_backends() -> tuple[str, ...]:
    return ("numba", "numpy") if _HAVE_NUMBA else ("numpy",)


def set_backend(name: str) -> None:
    """Switch kernel implementations at runtime (tests and benchmarks)."""
    global _ACTIVE
    if name not in ("numba", "numpy"):
        raise ConfigError(f"unknown backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ConfigError("numba backend requested but numba is not importable")
    _ACTIVE = name


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right inner summation order."""
    if _ACTIVE == "numba":
        return _matmul_numba(a, b)
    return _matmul_numpy(a, b)


def ema_update(m, v, g, beta1: float, beta2: float) -> None:
    """In-place first/second moment EMA step: m <- b1*m + (1-b1)*g, likewise v with g^2."""
    c1 = 1.0 - beta1
    c2 = 1.0 - beta2
    if _ACTIVE == "numba":
        _ema_update_numba(m, v, g, beta1, c1, beta2, c2)
    else:
        _ema_update_numpy(m, v, g, beta1, c1, beta2, c2)


def adamw_update(theta, m, v, decay: float, step_size: float, bc2: float, eps: float) -> None:
    """In-place decoupled-decay update: theta <- theta*decay - step_size*m/(sqrt(v/bc2)+eps)."""
    if _ACTIVE == "numba":
        _adamw_update_numba(theta, m, v, decay, step_size, bc2, eps)
    else:
        _adamw_update_numpy(theta, m, v, decay, step_size, bc2, eps)


def fill_u64(state: np.ndarray, out: np.ndarray) -> None:
    """Advance a 4-word xoshiro256** state, writing ``out.size`` raw draws."""
    if _ACTIVE == "numba":
        _fill_u64_numba(state, out)
    else:
        _fill_u64_numpy(state, out)
