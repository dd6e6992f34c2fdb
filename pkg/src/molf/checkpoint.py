"""Bit-exact checkpointing: a text manifest plus one raw little-endian blob.

A checkpoint is a directory holding ``manifest`` (UTF-8 text: format
version, metadata, and a tensor registry with name/dtype/shape/offset) and
``tensors.bin`` (raw IEEE-754 values, row-major, concatenated in registry
order).  Everything needed to resume a run round-trips bitwise: model
parameters, per-expert optimizer moments and step counters, the PRNG state,
and the task matrices.  Loading never mutates live objects; it builds fresh
ones and hands them back.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import LoRAExpert, MLPNetwork, MoLFModule
from .rng import Rng
from .synthtasks import SpectralTask

_FORMAT_LINE = "molf-checkpoint 1"
_BLOB_NAME = "tensors.bin"
_DTYPES = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4")}


@dataclass
class RestoredMoments:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int


@dataclass
class LoadedCheckpoint:
    step: int
    network: MLPNetwork
    expert_states: dict[str, list[RestoredMoments]] | None
    rng: Rng | None
    task: SpectralTask | None


def _iter_model_tensors(network: MLPNetwork):
    for mod in network.modules:
        yield f"model.{mod.name}.w_base", mod.w_base
        if mod.bias is not None:
            yield f"model.{mod.name}.bias", mod.bias
        for j, e in enumerate(mod.experts):
            yield f"model.{mod.name}.expert{j}.a", e.a
            yield f"model.{mod.name}.expert{j}.b", e.b


def _carry_bits(carry: float | None) -> str:
    if carry is None:
        return "-"
    return struct.pack("<d", carry).hex()


def _carry_from_bits(text: str) -> float | None:
    if text == "-":
        return None
    return struct.unpack("<d", bytes.fromhex(text))[0]


def save_checkpoint(path, network: MLPNetwork, *, step: int,
                    expert_states: dict | None = None, rng: Rng | None = None,
                    task: SpectralTask | None = None, dtype: str = "f8") -> str:
    """Write a checkpoint directory atomically; the target must not exist.

    ``dtype="f4"`` stores tensors in 32-bit (smaller, lossy); the default
    ``f8`` round-trips every value bitwise.
    """
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {dtype!r}")
    np_dtype = _DTYPES[dtype]
    path = Path(path)
    if path.exists():
        raise CheckpointError(f"checkpoint target already exists: {path}")

    meta: list[tuple[str, str]] = [("step", str(int(step)))]
    tensors: list[tuple[str, np.ndarray]] = list(_iter_model_tensors(network))

    meta.append(("model.n_modules", str(len(network.modules))))
    for i, mod in enumerate(network.modules):
        p = f"model.module{i}"
        meta.extend([
            (f"{p}.name", mod.name),
            (f"{p}.d_out", str(mod.d_out)),
            (f"{p}.d_in", str(mod.d_in)),
            (f"{p}.has_bias", "1" if mod.bias is not None else "0"),
            (f"{p}.dropout_rate", repr(mod.dropout_rate)),
            (f"{p}.base_trainable", "1" if mod.base_trainable else "0"),
            (f"{p}.n_experts", str(len(mod.experts))),
        ])
        for j, e in enumerate(mod.experts):
            meta.append((f"{p}.expert{j}.rank", str(e.rank)))
            meta.append((f"{p}.expert{j}.alpha", repr(e.alpha)))

    meta.append(("has_optim", "1" if expert_states is not None else "0"))
    if expert_states is not None:
        for mod in network.modules:
            states = expert_states[mod.name]
            for j, st in enumerate(states):
                meta.append((f"optim.{mod.name}.e{j}.t", str(int(st.t))))
                for k, (m, v) in enumerate(zip(st.m, st.v)):
                    tensors.append((f"optim.{mod.name}.e{j}.p{k}.m", m))
                    tensors.append((f"optim.{mod.name}.e{j}.p{k}.v", v))

    meta.append(("has_rng", "1" if rng is not None else "0"))
    if rng is not None:
        s0, s1, s2, s3, carry = rng.get_state()
        meta.extend([
            ("rng.s0", str(s0)), ("rng.s1", str(s1)),
            ("rng.s2", str(s2)), ("rng.s3", str(s3)),
            ("rng.carry", _carry_bits(carry)),
        ])

    meta.append(("has_task", "1" if task is not None else "0"))
    if task is not None:
        meta.extend([
            ("task.regime", task.regime),
            ("task.noise_std", repr(task.noise_std)),
            ("task.d_out", str(task.d_out)),
            ("task.d_in", str(task.d_in)),
        ])
        tensors.append(("task.w_base", task.w_base))
        tensors.append(("task.delta_star", task.delta_star))
        tensors.append(("task.spectrum", task.spectrum.reshape(1, -1)))

    lines = [_FORMAT_LINE]
    lines.extend(f"meta {k} {v}" for k, v in meta)
    offset = 0
    chunks: list[bytes] = []
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
        lines.append(
            f"tensor {name} {dtype} {arr.shape[0]} {arr.shape[1]} {offset} {_BLOB_NAME}"
        )
        chunks.append(raw)
        offset += len(raw)

    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        raise CheckpointError(f"stale temporary checkpoint in the way: {tmp}")
    tmp.mkdir(parents=True)
    (tmp / "manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with open(tmp / _BLOB_NAME, "wb") as fh:
        for raw in chunks:
            fh.write(raw)
    os.rename(tmp, path)
    return str(path)


def _parse_manifest(path: Path):
    manifest = path / "manifest"
    if not manifest.is_file():
        raise CheckpointError(f"no manifest in {path}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _FORMAT_LINE:
        head = lines[0] if lines else "<empty>"
        raise CheckpointError(f"unsupported checkpoint format: {head!r}")
    meta: dict[str, str] = {}
    tensors: list[tuple[str, str, int, int, int, str]] = []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(" ")
        if parts[0] == "meta" and len(parts) == 3:
            meta[parts[1]] = parts[2]
        elif parts[0] == "tensor" and len(parts) == 7:
            name, dt, rows, cols, off, fname = parts[1:]
            if dt not in _DTYPES:
                raise CheckpointError(f"tensor {name}: unknown dtype {dt!r}")
            tensors.append((name, dt, int(rows), int(cols), int(off), fname))
        else:
            raise CheckpointError(f"malformed manifest line: {line!r}")
    return meta, tensors


def _meta(meta: dict[str, str], key: str) -> str:
    try:
        return meta[key]
    except KeyError:
        raise CheckpointError(f"manifest is missing meta key {key!r}") from None


def load_checkpoint(path) -> LoadedCheckpoint:
    """Read a checkpoint back into fresh objects, verifying sizes tensor by tensor."""
    path = Path(path)
    meta, registry = _parse_manifest(path)

    blobs: dict[str, bytes] = {}
    arrays: dict[str, np.ndarray] = {}
    for name, dt, rows, cols, off, fname in registry:
        if fname not in blobs:
            blob_path = path / fname
            if not blob_path.is_file():
                raise CheckpointError(f"tensor {name}: blob file {fname} is missing")
            blobs[fname] = blob_path.read_bytes()
        blob = blobs[fname]
        np_dtype = _DTYPES[dt]
        nbytes = rows * cols * np_dtype.itemsize
        if off < 0 or off + nbytes > len(blob):
            raise CheckpointError(
                f"tensor {name}: needs bytes [{off}, {off + nbytes}) but blob "
                f"{fname} holds {len(blob)}"
            )
        flat = np.frombuffer(blob, dtype=np_dtype, count=rows * cols, offset=off)
        arrays[name] = flat.astype(np.float64).reshape(rows, cols)

    def take(name: str, shape: tuple[int, int]) -> np.ndarray:
        if name not in arrays:
            raise CheckpointError(f"tensor {name} is missing from the registry")
        arr = arrays[name]
        if arr.shape != shape:
            raise CheckpointError(
                f"tensor {name}: shape {arr.shape} != expected {shape}"
            )
        return arr

    n_modules = int(_meta(meta, "model.n_modules"))
    modules: list[MoLFModule] = []
    for i in range(n_modules):
        p = f"model.module{i}"
        name = _meta(meta, f"{p}.name")
        d_out = int(_meta(meta, f"{p}.d_out"))
        d_in = int(_meta(meta, f"{p}.d_in"))
        has_bias = _meta(meta, f"{p}.has_bias") == "1"
        dropout_rate = float(_meta(meta, f"{p}.dropout_rate"))
        base_trainable = _meta(meta, f"{p}.base_trainable") == "1"
        n_experts = int(_meta(meta, f"{p}.n_experts"))
        w = take(f"model.{name}.w_base", (d_out, d_in))
        bias = take(f"model.{name}.bias", (d_out, 1)) if has_bias else None
        experts = []
        for j in range(n_experts):
            rank = int(_meta(meta, f"{p}.expert{j}.rank"))
            alpha = float(_meta(meta, f"{p}.expert{j}.alpha"))
            a = take(f"model.{name}.expert{j}.a", (rank, d_in))
            b = take(f"model.{name}.expert{j}.b", (d_out, rank))
            experts.append(LoRAExpert(rank, alpha, a, b))
        modules.append(MoLFModule(
            name, w, bias=bias, experts=experts,
            dropout_rate=dropout_rate, base_trainable=base_trainable,
        ))
    network = MLPNetwork(modules)

    expert_states = None
    if _meta(meta, "has_optim") == "1":
        expert_states = {}
        for mod in network.modules:
            states = []
            for j, pw in enumerate(mod.pathways()):
                t = int(_meta(meta, f"optim.{mod.name}.e{j}.t"))
                m = []
                v = []
                for k, param in enumerate(pw.arrays):
                    m.append(take(f"optim.{mod.name}.e{j}.p{k}.m", param.shape))
                    v.append(take(f"optim.{mod.name}.e{j}.p{k}.v", param.shape))
                states.append(RestoredMoments(m, v, t))
            expert_states[mod.name] = states

    rng = None
    if _meta(meta, "has_rng") == "1":
        rng = Rng.from_state((
            int(_meta(meta, "rng.s0")), int(_meta(meta, "rng.s1")),
            int(_meta(meta, "rng.s2")), int(_meta(meta, "rng.s3")),
            _carry_from_bits(_meta(meta, "rng.carry")),
        ))

    task = None
    if _meta(meta, "has_task") == "1":
        d_out = int(_meta(meta, "task.d_out"))
        d_in = int(_meta(meta, "task.d_in"))
        n = min(d_out, d_in)
        task = SpectralTask(
            d_out=d_out,
            d_in=d_in,
            w_base=take("task.w_base", (d_out, d_in)),
            delta_star=take("task.delta_star", (d_out, d_in)),
            spectrum=take("task.spectrum", (1, n)).ravel(),
            regime=_meta(meta, "task.regime"),
            noise_std=float(_meta(meta, "task.noise_std")),
        )

    return LoadedCheckpoint(
        step=int(_meta(meta, "step")),
        network=network,
        expert_states=expert_states,
        rng=rng,
        task=task,
    )


def restore_optimizer(optimizer, loaded: LoadedCheckpoint) -> None:
    """Copy checkpointed moments and step counters into a freshly built optimizer."""
    if loaded.expert_states is None:
        raise CheckpointError("checkpoint carries no optimizer state")
    for name, states in optimizer.states.items():
        if name not in loaded.expert_states:
            raise CheckpointError(f"checkpoint has no optimizer state for module {name}")
        restored = loaded.expert_states[name]
        if len(restored) != len(states):
            raise CheckpointError(
                f"module {name}: checkpoint has {len(restored)} expert states, "
                f"optimizer expects {len(states)}"
            )
        for j, (st, rs) in enumerate(zip(states, restored)):
            if len(rs.m) != len(st.m):
                raise CheckpointError(
                    f"module {name} expert {j}: parameter count mismatch"
                )
            for k in range(len(st.m)):
                if rs.m[k].shape != st.m[k].shape:
                    raise CheckpointError(
                        f"module {name} expert {j} param {k}: moment shape "
                        f"{rs.m[k].shape} != {st.m[k].shape}"
                    )
                st.m[k][...] = rs.m[k]
                st.v[k][...] = rs.v[k]
            st.t = rs.t
