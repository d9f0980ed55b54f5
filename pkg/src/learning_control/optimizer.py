"""Projected gradient ascent over control schedules.

The objective V(schedule) and its exact gradient come from the adjoint sweep
in `value`; this module just climbs.  With backtracking (the default) a
candidate step is accepted only if it does not decrease V, halving the step
up to 20 times before declaring a stall, so the recorded V trace is
non-decreasing by construction.  `adaptive_moments` is a standard Adam
variant of the ascent direction; projection onto box bounds happens after
every update.

Also here: parameter sweeps over run configs (process pool, LE_THREADS caps
the workers) and the multi-task objective that treats shared initial weights
as the control.
"""

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .value import evaluate_value, grad_value, maml_value_and_grad, CostSpec, ValueSpec


@dataclass
class OptimizerSpec:
    """Ascent hyperparameters.

    alpha_g is the base step size, iters the number of updates, update_rule
    one of {plain, adaptive_moments}.  seed is reserved for stochastic
    variants and currently unused.
    """

    alpha_g: float = 0.1
    iters: int = 100
    update_rule: str = "plain"
    backtracking: bool = True
    seed: int = 0
    max_halvings: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.update_rule not in ("plain", "adaptive_moments"):
            raise ValueError(f"unknown update rule '{self.update_rule}'")
        if self.alpha_g <= 0:
            raise ValueError("alpha_g must be positive")
        if self.iters < 0:
            raise ValueError("iters must be nonnegative")


@dataclass
class OptTrace:
    """Per-iteration record; entry 0 describes the initial schedule."""

    V: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    alpha_used: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    stalled_at: int | None = None


def _tree_norm(arrays):
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))


def _make_objective(dspec, task, vspec):
    multi = isinstance(task, (list, tuple))

    def with_grad(schedule):
        if multi:
            v, g, _ = maml_value_and_grad(dspec, task, schedule)
            return v, g
        v, g, _ = grad_value(dspec, task, schedule, vspec)
        return v, g

    def forward(schedule):
        if multi:
            vs = ValueSpec(gamma=1.0, eta=1.0, cost=CostSpec("none"), mode="per_step_sum")
            return sum(evaluate_value(dspec, t, schedule, vs) for t in task)
        return evaluate_value(dspec, task, schedule, vspec)

    return with_grad, forward


def optimize(dspec, task, vspec, ospec, init_schedule):
    """Maximize V over the schedule's values; returns (schedule, trace).

    `task` may be a TaskMoments, a TaskSchedule, or a sequence of tasks (the
    latter switches to the shared-initial-weights objective).  trace.V[0] is
    the value of the initial schedule, computed by the same code path as
    every later evaluation.
    """
    with_grad, forward = _make_objective(dspec, task, vspec)
    cur = init_schedule.project()
    v_cur, g_cur = with_grad(cur)
    trace = OptTrace()
    trace.V.append(v_cur)
    trace.grad_norm.append(_tree_norm(g_cur))
    trace.alpha_used.append(0.0)
    trace.wall_ms.append(0.0)

    m_state = None
    v_state = None
    if ospec.update_rule == "adaptive_moments":
        m_state = tuple(np.zeros_like(v) for v in cur.values)
        v_state = tuple(np.zeros_like(v) for v in cur.values)

    for k in range(ospec.iters):
        tick = time.perf_counter()
        if ospec.update_rule == "adaptive_moments":
            t = k + 1
            m_state = tuple(ospec.beta1 * m + (1 - ospec.beta1) * g for m, g in zip(m_state, g_cur))
            v_state = tuple(ospec.beta2 * v + (1 - ospec.beta2) * g * g for v, g in zip(v_state, g_cur))
            bc1 = 1 - ospec.beta1**t
            bc2 = 1 - ospec.beta2**t
            direction = tuple((m / bc1) / (np.sqrt(v / bc2) + ospec.eps) for m, v in zip(m_state, v_state))
        else:
            direction = g_cur

        alpha = ospec.alpha_g
        accepted = False
        cand = None
        v_cand = None
        for _ in range(ospec.max_halvings + 1):
            cand = cur.with_values(
                tuple(val + alpha * d for val, d in zip(cur.values, direction))
            ).project()
            if not ospec.backtracking:
                accepted = True
                break
            v_cand = forward(cand)
            if v_cand >= v_cur:
                accepted = True
                break
            alpha *= 0.5
        elapsed = (time.perf_counter() - tick) * 1000.0
        if not accepted:
            trace.stalled_at = k
            break
        cur = cand
        v_cur, g_cur = with_grad(cur)
        trace.V.append(v_cur)
        trace.grad_norm.append(_tree_norm(g_cur))
        trace.alpha_used.append(alpha)
        trace.wall_ms.append(elapsed + 0.0)
    return cur, trace


def maml_objective(dspec, tasks, schedule, steps_ahead=None):
    """V and gradient for shared initial weights over a task set.

    Thin public wrapper over the value-module implementation; steps_ahead
    overrides dspec.n_steps when given.
    """
    v, g, _ = maml_value_and_grad(dspec, tasks, schedule, steps_ahead=steps_ahead)
    return v, g


def _sweep_worker(config):
    from .experiments import run

    return run(config)


def sweep(base_config, param_name, values, parallelism=None):
    """Run the scenario once per value of one dotted config parameter.

    Results come back in input order.  Output directories (when configured)
    get a per-value subdirectory so parallel runs never collide.  Worker
    count: `parallelism` if given, else one per value, capped by the
    LE_THREADS environment variable and the machine.
    """
    from .experiments import override_param

    configs = []
    for i, v in enumerate(values):
        cfg = override_param(base_config, param_name, v, run_suffix=f"{param_name}={v}")
        configs.append(cfg)
    workers = parallelism if parallelism else min(len(configs), os.cpu_count() or 1)
    cap = os.environ.get("LE_THREADS")
    if cap:
        workers = max(1, min(workers, int(cap)))
    if workers <= 1 or len(configs) <= 1:
        return [_sweep_worker(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_worker, configs))
