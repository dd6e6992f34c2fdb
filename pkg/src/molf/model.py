"""MoLF linear modules and small MLP networks built from them.

A ``MoLFModule`` is one linear projection holding a dense base weight (the
FFT pathway) and any number of LoRA expert pairs.  The forward pass is an
ungated superposition: every pathway contributes for every input, and
update sparsity is deferred entirely to the optimizer.  With
``base_trainable=False`` (MoLF-E) the base weight and bias are frozen and
routing happens among the LoRA experts only.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ContractError, DimensionError
from .numerics import Node, Tape, as_matrix
from .rng import Rng

FFT = "fft"
LORA = "lora"

_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


class LoRAExpert:
    """One low-rank pathway: factors a (r x d_in), b (d_out x r), scale alpha."""

    __slots__ = ("rank", "alpha", "a", "b")

    def __init__(self, rank: int, alpha: float, a: np.ndarray, b: np.ndarray):
        if rank < 1:
            raise ContractError(f"expert rank must be >= 1, got {rank}")
        if alpha <= 0:
            raise ContractError(f"expert alpha must be > 0, got {alpha}")
        self.rank = int(rank)
        self.alpha = float(alpha)
        self.a = as_matrix(a, "expert A")
        self.b = as_matrix(b, "expert B")

    @property
    def scaling(self) -> float:
        """Rank-stabilized scale alpha/sqrt(rank), used by forward and fusion alike."""
        return self.alpha / math.sqrt(self.rank)

    @classmethod
    def zeros(cls, rank: int, alpha: float, d_out: int, d_in: int) -> "LoRAExpert":
        return cls(rank, alpha, np.zeros((rank, d_in)), np.zeros((d_out, rank)))


@dataclass(frozen=True)
class PathwayRef:
    """One routable expert's parameter bundle, in a fixed parameter order."""

    kind: str                      # FFT or LORA
    names: tuple[str, ...]
    arrays: tuple[np.ndarray, ...]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays)


class MoLFModule:
    """A linear projection superposing a dense base pathway and LoRA experts."""

    def __init__(self, name: str, w_base, bias=None, experts=None,
                 dropout_rate: float = 0.0, base_trainable: bool = True):
        if not _NAME_RE.match(name):
            raise ContractError(f"module name {name!r} must be a plain token")
        self.name = name
        self.w_base = as_matrix(w_base, f"{name}.w_base")
        self.bias = None if bias is None else as_matrix(bias, f"{name}.bias")
        if self.bias is not None and self.bias.shape != (self.d_out, 1):
            raise DimensionError(
                f"{name}: bias shape {self.bias.shape} != ({self.d_out}, 1)"
            )
        if not 0.0 <= dropout_rate < 1.0:
            raise ContractError(f"{name}: dropout_rate must be in [0, 1)")
        self.dropout_rate = float(dropout_rate)
        self.base_trainable = bool(base_trainable)
        self.experts: list[LoRAExpert] = list(experts) if experts else []
        if not self.base_trainable and not self.experts:
            raise ContractError(f"{name}: a frozen-base module needs at least one expert")
        for i, e in enumerate(self.experts):
            self._check_expert(i, e)

    def _check_expert(self, i: int, e: LoRAExpert) -> None:
        if e.a.shape != (e.rank, self.d_in) or e.b.shape != (self.d_out, e.rank):
            raise DimensionError(
                f"{self.name}.expert{i}: A {e.a.shape} / B {e.b.shape} incompatible "
                f"with rank {e.rank} and module ({self.d_out} x {self.d_in})"
            )
        if e.rank > min(self.d_out, self.d_in):
            warnings.warn(
                f"{self.name}.expert{i}: rank {e.rank} exceeds min(d_out, d_in)="
                f"{min(self.d_out, self.d_in)}; capacity is redundant"
            )

    @property
    def d_out(self) -> int:
        return self.w_base.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_base.shape[1]

    def pathways(self) -> list[PathwayRef]:
        """Routable experts in index order; the FFT pathway holds index 0 when trainable."""
        out: list[PathwayRef] = []
        if self.base_trainable:
            names = [f"{self.name}.w_base"]
            arrays = [self.w_base]
            if self.bias is not None:
                names.append(f"{self.name}.bias")
                arrays.append(self.bias)
            out.append(PathwayRef(FFT, tuple(names), tuple(arrays)))
        for i, e in enumerate(self.experts):
            out.append(PathwayRef(
                LORA,
                (f"{self.name}.expert{i}.a", f"{self.name}.expert{i}.b"),
                (e.a, e.b),
            ))
        return out

    def _check_input(self, x: np.ndarray) -> None:
        if x.shape[0] != self.d_in:
            raise DimensionError(
                f"{self.name}: input has {x.shape[0]} rows, expected d_in={self.d_in}"
            )

    def _wants_mask(self, training: bool) -> bool:
        return training and self.dropout_rate > 0.0 and bool(self.experts)

    def apply(self, x, training: bool = False, rng: Rng | None = None) -> np.ndarray:
        """Superposed forward pass on plain arrays (column-batch convention)."""
        x = as_matrix(x, f"{self.name} input")
        self._check_input(x)
        y = nm.matmul(self.w_base, x)
        if self.bias is not None:
            y = y + self.bias
        xs = x
        if self._wants_mask(training):
            if rng is None:
                raise ContractError(f"{self.name}: training dropout requires an rng")
            xs = x * rng.dropout_mask(x.shape[0], x.shape[1], self.dropout_rate)
        for e in self.experts:
            y = y + e.scaling * nm.matmul(e.b, nm.matmul(e.a, xs))
        return y

    def trace_forward(self, tape: Tape, x: Node, training: bool = False,
                      rng: Rng | None = None) -> tuple[Node, dict[str, Node]]:
        """Forward pass on a tape; returns the output node and the parameter leaves."""
        self._check_input(x.value)
        leaves: dict[str, Node] = {}
        w = tape.leaf(self.w_base, f"{self.name}.w_base")
        leaves[w.name] = w
        y = tape.matmul(w, x)
        if self.bias is not None:
            b = tape.leaf(self.bias, f"{self.name}.bias")
            leaves[b.name] = b
            y = tape.add(y, b)
        xs = x
        if self._wants_mask(training):
            if rng is None:
                raise ContractError(f"{self.name}: training dropout requires an rng")
            # one shared mask per module per step, covering every LoRA expert
            xs = tape.dropout(x, self.dropout_rate, rng)
        for i, e in enumerate(self.experts):
            an = tape.leaf(e.a, f"{self.name}.expert{i}.a")
            bn = tape.leaf(e.b, f"{self.name}.expert{i}.b")
            leaves[an.name] = an
            leaves[bn.name] = bn
            y = tape.add(y, tape.scale(tape.matmul(bn, tape.matmul(an, xs)), e.scaling))
        return y, leaves


def init_experts(module: MoLFModule, rng: Rng, a_std: float = 1.0) -> None:
    """Gaussian(0, a_std^2/d_in) init for every A factor; B starts at zero."""
    scale = a_std / math.sqrt(module.d_in)
    for e in module.experts:
        e.a[...] = rng.gaussian_matrix(e.rank, module.d_in) * scale
        e.b[...] = 0.0


class MLPNetwork:
    """MoLF modules chained with ReLU between layers; the last layer is linear."""

    def __init__(self, modules: list[MoLFModule]):
        if not modules:
            raise ContractError("network needs at least one module")
        for prev, nxt in zip(modules, modules[1:]):
            if nxt.d_in != prev.d_out:
                raise DimensionError(
                    f"module {nxt.name} expects d_in={nxt.d_in} but "
                    f"{prev.name} produces d_out={prev.d_out}"
                )
        self.modules = list(modules)

    @property
    def d_in(self) -> int:
        return self.modules[0].d_in

    @property
    def d_out(self) -> int:
        return self.modules[-1].d_out

    def is_single_linear(self) -> bool:
        return len(self.modules) == 1

    def apply(self, x, training: bool = False, rng: Rng | None = None) -> np.ndarray:
        h = as_matrix(x, "network input")
        for i, mod in enumerate(self.modules):
            h = mod.apply(h, training=training, rng=rng)
            if i < len(self.modules) - 1:
                h = np.maximum(h, 0.0)
        return h

    def trace_forward(self, tape: Tape, x: Node, training: bool = False,
                      rng: Rng | None = None) -> tuple[Node, dict[str, Node]]:
        leaves: dict[str, Node] = {}
        h = x
        for i, mod in enumerate(self.modules):
            h, mod_leaves = mod.trace_forward(tape, h, training=training, rng=rng)
            leaves.update(mod_leaves)
            if i < len(self.modules) - 1:
                h = tape.relu(h)
        return h, leaves

    def pathway_map(self) -> dict[str, list[PathwayRef]]:
        return {mod.name: mod.pathways() for mod in self.modules}


def build_mlp(layer_dims, expert_ranks, *, expert_alphas=16.0, mode: str = "molf",
              dropout_rate: float = 0.0, with_bias: bool = True, rng: Rng,
              a_std: float = 1.0, w_std: float | None = None,
              name_prefix: str = "layer") -> MLPNetwork:
    """Build an MLP of MoLF modules, one independent routing site per layer.

    ``mode="molf"`` keeps the base weights trainable (FFT pathway at expert
    index 0); ``mode="molf_e"`` freezes base weights and biases so routing
    searches among the LoRA experts only.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ContractError(f"layer_dims needs >= 2 entries, got {dims}")
    if any(d < 1 for d in dims):
        raise ContractError(f"layer_dims must be positive, got {dims}")
    if mode not in ("molf", "molf_e"):
        raise ContractError(f"mode must be 'molf' or 'molf_e', got {mode!r}")
    ranks = [int(r) for r in expert_ranks]
    if np.isscalar(expert_alphas):
        alphas = [float(expert_alphas)] * len(ranks)
    else:
        alphas = [float(a) for a in expert_alphas]
    if len(alphas) != len(ranks):
        raise ContractError(
            f"expert_alphas has {len(alphas)} entries for {len(ranks)} ranks"
        )
    if mode == "molf_e" and not ranks:
        raise ContractError("molf_e mode needs at least one LoRA expert")

    modules = []
    for layer, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        std = w_std if w_std is not None else 1.0 / math.sqrt(d_in)
        w = rng.gaussian_matrix(d_out, d_in) * std
        bias = np.zeros((d_out, 1)) if with_bias else None
        experts = [LoRAExpert.zeros(r, a, d_out, d_in) for r, a in zip(ranks, alphas)]
        mod = MoLFModule(
            f"{name_prefix}{layer}", w, bias=bias, experts=experts,
            dropout_rate=dropout_rate, base_trainable=(mode == "molf"),
        )
        init_experts(mod, rng, a_std=a_std)
        modules.append(mod)
    return MLPNetwork(modules)
