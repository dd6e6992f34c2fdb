"""Training harness: run configs, the train loop, traces, metrics, resume.

A run is fully determined by its ``RunConfig`` (plus the code version): the
same config replayed into a fresh directory produces byte-identical
``config``, ``metrics.csv``, ``traces.jsonl``, ``winner_grid.csv`` and
checkpoint files.  ``MOLF_SEED`` overrides the config seed; an explicit
seed argument (the CLI flag) overrides both.
"""

from __future__ import annotations

import dataclasses
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from .errors import ConfigError, MolfError, NumericError
from .fusion import fuse
from .model import FFT, MLPNetwork, build_mlp
from .numerics import Tape
from .optimizer import DENSE, EPD, PFN, MoLFOptimizer, OptimizerConfig, RoutingDecision
from .rng import Rng
from .schedule import ScheduleSpec
from .synthtasks import (
    CONCENTRATED,
    CUSTOM,
    HEAVY_TAIL,
    SpectralTask,
    gen_spectral_target,
    population_loss,
    sample_batch,
)

SEED_ENV_VAR = "MOLF_SEED"


@dataclass
class RunConfig:
    """Flat run description; every field maps 1:1 onto a config-file key."""

    seed: int = 0
    out_dir: str = ""
    total_steps: int = 100
    batch_size: int = 32
    trace_every: int = 1
    checkpoint_every: int = 0           # 0: only the final checkpoint
    task_regime: str = HEAVY_TAIL
    task_d_out: int = 64
    task_d_in: int = 64
    task_power: float = 0.1
    task_rank: int = 8
    task_noise_std: float = 0.0
    task_spectrum: tuple[float, ...] = ()
    net_dims: tuple[int, ...] = (64, 64)
    net_mode: str = "molf"
    net_bias: bool = False
    net_dropout: float = 0.0
    expert_ranks: tuple[int, ...] = (8,)
    expert_alphas: tuple[float, ...] = (16.0,)
    init_a_std: float = 1.0
    lr_fft: float = 5e-3
    lr_lora: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k_top: int = 1
    lambda_fft: float = 0.1
    lambda_lora: float = 0.01
    scoring: str = EPD
    schedule_kind: str = "cosine"
    warmup_ratio: float = 0.05
    grad_clip: float | None = None

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.trace_every < 1:
            raise ConfigError(f"trace_every must be >= 1, got {self.trace_every}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.task_regime not in (HEAVY_TAIL, CONCENTRATED, CUSTOM):
            raise ConfigError(f"unknown task_regime {self.task_regime!r}")
        if len(self.net_dims) < 2:
            raise ConfigError(f"net_dims needs >= 2 entries, got {self.net_dims}")
        if self.net_dims[0] != self.task_d_in or self.net_dims[-1] != self.task_d_out:
            raise ConfigError(
                f"net_dims {self.net_dims} must run from task_d_in={self.task_d_in} "
                f"to task_d_out={self.task_d_out}"
            )
        if self.net_mode not in ("molf", "molf_e"):
            raise ConfigError(f"net_mode must be molf|molf_e, got {self.net_mode!r}")
        if len(self.expert_alphas) not in (1, len(self.expert_ranks)):
            raise ConfigError("expert_alphas must match expert_ranks (or be a single value)")
        if self.scoring not in (EPD, PFN, DENSE):
            raise ConfigError(f"scoring must be epd|pfn|dense, got {self.scoring!r}")

    def alphas(self) -> tuple[float, ...]:
        if not self.expert_ranks:
            return ()
        if len(self.expert_alphas) == 1 and len(self.expert_ranks) > 1:
            return self.expert_alphas * len(self.expert_ranks)
        return self.expert_alphas


# --- flat key=value config files ------------------------------------------

_LIST_FIELDS = {"net_dims": int, "expert_ranks": int,
                "expert_alphas": float, "task_spectrum": float}
_BOOL_FIELDS = {"net_bias"}
_OPTIONAL_FLOAT_FIELDS = {"grad_clip"}
_ECHO_SKIP = {"out_dir"}  # the echo lives inside out_dir; keep run dirs comparable


def _parse_value(name: str, text: str, target_type):
    text = text.strip()
    if name in _LIST_FIELDS:
        conv = _LIST_FIELDS[name]
        if not text:
            return ()
        return tuple(conv(tok.strip()) for tok in text.split(","))
    if name in _BOOL_FIELDS:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if name in _OPTIONAL_FLOAT_FIELDS:
        return None if text.lower() in ("none", "") else float(text)
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    return text


def _format_value(name: str, value) -> str:
    if name in _LIST_FIELDS:
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if name in _BOOL_FIELDS:
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines ('#' comments allowed) into a RunConfig."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    seen: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        base_type = type(getattr(RunConfig(), key)) if key not in _OPTIONAL_FLOAT_FIELDS else float
        try:
            seen[key] = _parse_value(key, value, base_type)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    cfg = RunConfig(**seen)
    cfg.validate()
    return cfg


def format_config(cfg: RunConfig) -> str:
    """Canonical echo of a RunConfig, field order fixed, out_dir omitted."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        if f.name in _ECHO_SKIP:
            continue
        lines.append(f"{f.name} = {_format_value(f.name, getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def load_config_file(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def resolve_seed(cfg: RunConfig, override: int | None = None) -> int:
    """Seed precedence: explicit override, then MOLF_SEED, then the config."""
    if override is not None:
        return int(override)
    env = os.environ.get(SEED_ENV_VAR, "").strip()
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from None
    return cfg.seed


# --- run assembly -------------------------------------------------------------

def build_task(cfg: RunConfig, rng: Rng) -> SpectralTask:
    return gen_spectral_target(
        cfg.task_d_out, cfg.task_d_in, cfg.task_regime, rng,
        power=cfg.task_power, rank=cfg.task_rank,
        spectrum=cfg.task_spectrum or None, noise_std=cfg.task_noise_std,
    )


def build_network(cfg: RunConfig, rng: Rng, task: SpectralTask) -> MLPNetwork:
    network = build_mlp(
        cfg.net_dims, cfg.expert_ranks, expert_alphas=cfg.alphas(),
        mode=cfg.net_mode, dropout_rate=cfg.net_dropout,
        with_bias=cfg.net_bias, rng=rng, a_std=cfg.init_a_std,
    )
    if network.is_single_linear() and network.modules[0].w_base.shape == task.w_base.shape:
        # linear students start from the task's pretrained base weight
        network.modules[0].w_base[...] = task.w_base
    return network


def build_optimizer_config(cfg: RunConfig) -> OptimizerConfig:
    return OptimizerConfig(
        lr_fft=cfg.lr_fft, lr_lora=cfg.lr_lora, beta1=cfg.beta1, beta2=cfg.beta2,
        eps=cfg.eps, k_top=cfg.k_top, lambda_fft=cfg.lambda_fft,
        lambda_lora=cfg.lambda_lora, scoring=cfg.scoring,
        schedule=ScheduleSpec(cfg.schedule_kind, cfg.total_steps, cfg.warmup_ratio),
        grad_clip=cfg.grad_clip,
    )


@dataclass
class RunSummary:
    out_dir: str
    steps: int
    final_train_loss: float
    final_population_loss: float | None
    winner_fractions: dict[str, list[float]]
    class_fractions: dict[str, float]
    checkpoint_path: str


def _decision_json(d: RoutingDecision) -> str:
    return json.dumps({
        "step": d.step,
        "module": d.module,
        "scores": list(d.scores),
        "winner": list(d.winners),
        "lr_used": list(d.lr_used),
        "mode": d.mode,
    }, separators=(", ", ": "))


def _student_weight(network: MLPNetwork):
    mod = network.modules[0]
    return fuse(mod), mod.bias


def train_run(cfg: RunConfig, *, seed_override: int | None = None,
              resume_from: str | None = None) -> RunSummary:
    """Run the training loop described by ``cfg`` into a fresh out_dir."""
    cfg.validate()
    if not cfg.out_dir:
        raise ConfigError("out_dir must be set (config key or --out)")
    out = Path(cfg.out_dir)
    if (out / "config").exists():
        raise MolfError(f"refusing to overwrite an existing run dir: {out}")
    out.mkdir(parents=True, exist_ok=True)

    seed = resolve_seed(cfg, seed_override)
    ocfg = build_optimizer_config(cfg)

    if resume_from is None:
        rng = Rng(seed)
        task = build_task(cfg, rng)
        network = build_network(cfg, rng, task)
        optimizer = MoLFOptimizer(network, ocfg)
        start_step = 0
    else:
        loaded = load_checkpoint(resume_from)
        if loaded.task is None or loaded.rng is None or loaded.expert_states is None:
            raise MolfError(f"{resume_from}: not a resumable training checkpoint")
        task = loaded.task
        network = loaded.network
        rng = loaded.rng
        optimizer = MoLFOptimizer(network, ocfg)
        restore_optimizer(optimizer, loaded)
        start_step = loaded.step
        if start_step >= cfg.total_steps:
            raise ConfigError(
                f"checkpoint is at step {start_step}, config stops at {cfg.total_steps}"
            )

    echo = format_config(dataclasses.replace(cfg, seed=seed))
    (out / "config").write_text(echo, encoding="utf-8")

    track_population = network.is_single_linear()
    loss_scale = task.d_out / 2.0

    metrics = open(out / "metrics.csv", "w", encoding="utf-8", newline="\n")
    traces = open(out / "traces.jsonl", "w", encoding="utf-8", newline="\n")
    metrics.write("step,train_loss,population_loss\n")

    last_loss = float("nan")
    last_pop: float | None = None
    decisions_log: list[RoutingDecision] = []
    ckpt_path = ""
    step = start_step
    try:
        for step in range(start_step, cfg.total_steps):
            x, y = sample_batch(task, cfg.batch_size, rng)
            try:
                tape = Tape()
                x_node = tape.leaf(x, "input")
                y_node, leaves = network.trace_forward(
                    tape, x_node, training=True, rng=rng
                )
                loss_node = tape.scale(tape.mse(y_node, y), loss_scale)
                last_loss = float(loss_node.value[0, 0])
                wrt = []
                grouping = []
                for mod in network.modules:
                    per_expert = []
                    for pw in mod.pathways():
                        nodes = [leaves[name] for name in pw.names]
                        wrt.extend(nodes)
                        per_expert.append(nodes)
                    grouping.append((mod.name, per_expert))
                grad_map = tape.backward(loss_node, wrt)
                grads = {
                    name: [[grad_map[n] for n in nodes] for nodes in per_expert]
                    for name, per_expert in grouping
                }
                step_decisions = optimizer.step(grads, step)
            except NumericError as exc:
                metrics.flush()
                traces.flush()
                abort_path = save_checkpoint(
                    out / f"ckpt_abort_{step}", network, step=step,
                    expert_states=optimizer.states, rng=rng, task=task,
                )
                (out / "diagnostic").write_text(
                    f"aborted at step {step}: {exc}\nlast good checkpoint: {abort_path}\n",
                    encoding="utf-8",
                )
                raise NumericError(
                    f"run aborted at step {step}: {exc} (state saved to {abort_path})"
                ) from exc

            if track_population:
                w_eff, bias = _student_weight(network)
                last_pop = population_loss(task, w_eff, bias)
            metrics.write(
                f"{step},{last_loss!r},{'' if last_pop is None else repr(last_pop)}\n"
            )
            if step % cfg.trace_every == 0:
                for d in step_decisions:
                    traces.write(_decision_json(d) + "\n")
                decisions_log.extend(step_decisions)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                metrics.flush()
                traces.flush()
                ckpt_path = save_checkpoint(
                    out / f"ckpt_{step + 1}", network, step=step + 1,
                    expert_states=optimizer.states, rng=rng, task=task,
                )
    finally:
        metrics.close()
        traces.close()

    final_tag = cfg.total_steps
    final_dir = out / f"ckpt_{final_tag}"
    if not final_dir.exists():
        ckpt_path = save_checkpoint(
            final_dir, network, step=cfg.total_steps,
            expert_states=optimizer.states, rng=rng, task=task,
        )
    else:
        ckpt_path = str(final_dir)

    export_traces(out)

    winner_fractions = _winner_fractions(decisions_log, network)
    class_fractions = _class_fractions(winner_fractions, network)
    return RunSummary(
        out_dir=str(out),
        steps=cfg.total_steps,
        final_train_loss=last_loss,
        final_population_loss=last_pop,
        winner_fractions=winner_fractions,
        class_fractions=class_fractions,
        checkpoint_path=ckpt_path,
    )


def _winner_fractions(decisions: list[RoutingDecision],
                      network: MLPNetwork) -> dict[str, list[float]]:
    by_module: dict[str, list[RoutingDecision]] = {m.name: [] for m in network.modules}
    for d in decisions:
        by_module.setdefault(d.module, []).append(d)
    out: dict[str, list[float]] = {}
    for mod in network.modules:
        ds = by_module[mod.name]
        n_experts = len(mod.pathways())
        counts = [0.0] * n_experts
        for d in ds:
            w = 1.0 / len(d.winners)
            for i in d.winners:
                counts[i] += w
        total = len(ds)
        out[mod.name] = [c / total for c in counts] if total else [0.0] * n_experts
    return out


def _class_fractions(winner_fractions: dict[str, list[float]],
                     network: MLPNetwork) -> dict[str, float]:
    per_class: dict[str, list[float]] = {}
    for mod in network.modules:
        fracs = winner_fractions[mod.name]
        kinds = [pw.kind for pw in mod.pathways()]
        sums: dict[str, float] = {}
        for kind, frac in zip(kinds, fracs):
            sums[kind] = sums.get(kind, 0.0) + frac
        for kind, value in sums.items():
            per_class.setdefault(kind, []).append(value)
    return {kind: sum(vals) / len(vals) for kind, vals in per_class.items()}


def export_traces(run_dir) -> tuple[str, str]:
    """Produce winner_grid.csv (module x traced-step) and winner_summary.csv."""
    run_dir = Path(run_dir)
    trace_path = run_dir / "traces.jsonl"
    grid_path = run_dir / "winner_grid.csv"
    summary_path = run_dir / "winner_summary.csv"
    records = []
    if trace_path.is_file():
        for line in trace_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                records.append(json.loads(line))
    if not records:
        warnings.warn(f"{trace_path}: no routing trace records; writing empty exports")
        grid_path.write_text("module\n", encoding="utf-8")
        summary_path.write_text("module,expert_index,fraction\n", encoding="utf-8")
        return str(grid_path), str(summary_path)

    modules: list[str] = []
    for r in records:
        if r["module"] not in modules:
            modules.append(r["module"])
    steps = sorted({r["step"] for r in records})
    winners: dict[tuple[str, int], list[int]] = {
        (r["module"], r["step"]): r["winner"] for r in records
    }

    lines = ["module," + ",".join(f"step_{s}" for s in steps)]
    for name in modules:
        cells = []
        for s in steps:
            w = winners.get((name, s))
            cells.append("|".join(str(i) for i in w) if w is not None else "")
        lines.append(name + "," + ",".join(cells))
    grid_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    summary_lines = ["module,expert_index,fraction"]
    for name in modules:
        counts: dict[int, float] = {}
        total = 0
        for s in steps:
            w = winners.get((name, s))
            if w is None:
                continue
            total += 1
            for i in w:
                counts[i] = counts.get(i, 0.0) + 1.0 / len(w)
        n_experts = max(counts) + 1 if counts else 0
        for i in range(n_experts):
            frac = counts.get(i, 0.0) / total if total else 0.0
            summary_lines.append(f"{name},{i},{frac!r}")
    summary_path.write_text("\n".join(summary_lines) + "\n", encoding="utf-8")
    return str(grid_path), str(summary_path)
