"""Built-in oracle suite behind ``molf check``.

Four fast properties, each with an independent oracle: reverse-mode
gradients vs. central finite differences, the EPD score's first-order
loss-drop prediction vs. measured drops on a quadratic, fusion exactness
on random modules, and the moment-universality replay (a never-winning
expert's moments must equal a routing-free EMA of the same gradient
stream, bitwise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MolfError
from .model import LoRAExpert, MoLFModule, build_mlp
from .numerics import Tape, finite_diff_grad
from .optimizer import (
    ExpertState,
    OptimizerConfig,
    apply_topk_update,
    track_moments,
)
from .fusion import verify_fusion
from .rng import Rng
from .schedule import ScheduleSpec
from .scoring import predicted_loss_drop


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_gradients(seeds: int = 20) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        rng = Rng(1000 + seed)
        network = build_mlp([5, 4, 3], [2], mode="molf", with_bias=True, rng=rng)
        for mod in network.modules:
            for e in mod.experts:
                e.b[...] = rng.gaussian_matrix(*e.b.shape) * 0.3
        x = rng.gaussian_matrix(5, 4)
        y = rng.gaussian_matrix(3, 4)
        scale = y.shape[0] / 2.0

        tape = Tape()
        xn = tape.leaf(x, "x")
        yn, leaves = network.trace_forward(tape, xn)
        loss = tape.scale(tape.mse(yn, y), scale)
        params = [leaves[name] for name in sorted(leaves)]
        grads = tape.backward(loss, params)

        for node in params:
            arr = node.value

            def f(p, _arr=arr):
                saved = _arr.copy()
                _arr[...] = p
                t2 = Tape()
                x2 = t2.leaf(x, "x")
                y2, _ = network.trace_forward(t2, x2)
                val = float(t2.scale(t2.mse(y2, y), scale).value[0, 0])
                _arr[...] = saved
                return val

            fd = finite_diff_grad(f, arr)
            ad = grads[node]
            denom = max(float(np.abs(fd).max()), 1e-8)
            worst = max(worst, float(np.abs(ad - fd).max()) / denom)
    return CheckResult(
        "gradient-check", worst <= 1e-4,
        f"max rel err {worst:.2e} over {seeds} seeds (tol 1e-4)",
    )


def check_epd_first_order(warmup: int = 50, measure: int = 100) -> CheckResult:
    rng = Rng(7)
    theta = rng.gaussian_matrix(4, 4)
    target = rng.gaussian_matrix(4, 4)
    cfg = OptimizerConfig(lr_fft=1e-3, lambda_fft=0.0,
                          schedule=ScheduleSpec("cosine", 10))
    state = ExpertState(
        kind="fft", param_names=("theta",), params=(theta,),
        m=[np.zeros_like(theta)], v=[np.zeros_like(theta)],
        t=0, n_params=theta.size, lr_base=1e-3, weight_decay=0.0,
    )
    lr = 1e-3
    devs = []
    for step in range(warmup + measure):
        grad = theta - target
        track_moments(state, [grad], cfg)
        loss_before = 0.5 * float(np.sum((theta - target) ** 2))
        predicted = predicted_loss_drop(state, lr, cfg.eps)
        # the score models the raw preconditioned step, without bias correction
        theta -= lr * (state.m[0] / (np.sqrt(state.v[0]) + cfg.eps))
        loss_after = 0.5 * float(np.sum((theta - target) ** 2))
        measured = loss_before - loss_after
        if step >= warmup:
            devs.append(abs(measured - predicted) / measured)
    mean_dev = float(np.mean(devs))
    return CheckResult(
        "epd-first-order", mean_dev <= 0.10,
        f"mean |measured-predicted|/measured = {mean_dev:.3f} (tol 0.10)",
    )


def check_fusion(probes: int = 100) -> CheckResult:
    rng = Rng(21)
    worst = 0.0
    for n_experts in (1, 2, 3):
        for rank in (1, 8, 16):
            experts = []
            for _ in range(n_experts):
                experts.append(LoRAExpert(
                    rank, 16.0,
                    rng.gaussian_matrix(rank, 32) * 0.2,
                    rng.gaussian_matrix(24, rank) * 0.2,
                ))
            mod = MoLFModule(
                f"fuse{n_experts}r{rank}", rng.gaussian_matrix(24, 32),
                bias=rng.gaussian_matrix(24, 1), experts=experts,
            )
            report = verify_fusion(mod, probes, rng, tol=1e-9)
            worst = max(worst, report.max_rel_deviation)
    return CheckResult(
        "fusion-exactness", worst <= 1e-9,
        f"max rel deviation {worst:.2e} over {probes} probes/module (tol 1e-9)",
    )


def check_ema_replay(steps: int = 100) -> CheckResult:
    rng = Rng(33)
    cfg = OptimizerConfig(lr_fft=1e-2, lr_lora=1e-2, schedule=ScheduleSpec("cosine", steps))
    theta_win = rng.gaussian_matrix(6, 6)
    theta_lose = rng.gaussian_matrix(6, 6)
    states = [
        ExpertState("fft", ("win",), (theta_win,), [np.zeros((6, 6))],
                    [np.zeros((6, 6))], 0, 36, 1e-2, 0.0),
        ExpertState("lora", ("lose",), (theta_lose,), [np.zeros((6, 6))],
                    [np.zeros((6, 6))], 0, 36, 1e-2, 0.0),
    ]
    stream = []
    for _ in range(steps):
        g_win = rng.gaussian_matrix(6, 6)
        g_lose = rng.gaussian_matrix(6, 6)
        stream.append(g_lose)
        track_moments(states[0], [g_win], cfg)
        track_moments(states[1], [g_lose], cfg)
        apply_topk_update(states, [0], [1e-2, 1e-2], cfg)  # expert 1 never wins
    m_replay = np.zeros((6, 6))
    v_replay = np.zeros((6, 6))
    replay = ExpertState("lora", ("replay",), (np.zeros((6, 6)),), [m_replay],
                         [v_replay], 0, 36, 1e-2, 0.0)
    for g in stream:
        track_moments(replay, [g], cfg)
    same = (
        np.array_equal(states[1].m[0], m_replay)
        and np.array_equal(states[1].v[0], v_replay)
        and states[1].t == replay.t
    )
    return CheckResult(
        "ema-replay", same,
        f"loser moments after {steps} routed steps vs routing-free replay: "
        + ("bitwise equal" if same else "MISMATCH"),
    )


def run_selfcheck(verbose: bool = True) -> list[CheckResult]:
    checks = [
        check_gradients,
        check_epd_first_order,
        check_fusion,
        check_ema_replay,
    ]
    results = []
    for fn in checks:
        try:
            res = fn()
        except MolfError as exc:
            res = CheckResult(fn.__name__, False, f"raised {exc}")
        results.append(res)
        if verbose:
            status = "PASS" if res.passed else "FAIL"
            print(f"{res.name:<20} {status}  {res.detail}")
    return results
