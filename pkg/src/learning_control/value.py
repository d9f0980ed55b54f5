"""Discounted cumulative performance of a learning trajectory, and its gradient.

The scalar being maximized is

    V = sum_i dt * gamma^{t_i} * (eta * P(t_i) - C(g(t_i))),    P = -<loss>,

a left-rule Riemann sum over the step grid that includes t_0 and excludes the
terminal time.  A second mode ("per_step_sum") drops dt and the discount and
scores the plain sum of losses at steps 1..N, which is the natural objective
when the control is the initial weights and the horizon is a handful of steps.

Gradients come from one reverse (adjoint) sweep through the recorded states:
exact for the discretized system, one forward plus one backward pass per
evaluation regardless of how many control degrees of freedom there are.
fd_check probes that gradient against central finite differences and is wired
into the CLI, so a broken derivative is loud.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from .control import ControlSchedule

COST_KINDS = ("none", "quadratic", "exp_frobenius", "anchored_norm", "fixed_norm")


@dataclass
class CostSpec:
    """Control effort penalty C(g).

    quadratic       beta * sum g^2
    exp_frobenius   exp(beta * sum g^2) - 1   (couples channels through the total)
    anchored_norm   beta * sum (g - anchor)^2;  anchor 1 keeps engagement near
                    its neutral value ("attentive"), anchor 0 prices any
                    engagement at all ("active")
    fixed_norm      beta * (sum g^2 - target_norm)^2, a soft norm constraint
    """

    kind: str = "none"
    beta: float = 0.0
    anchor: float = 1.0
    target_norm: float = 0.0

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ValueError(f"unknown cost kind '{self.kind}'")


def _ctrl_arrays(control):
    if control is None:
        return []
    if isinstance(control, tuple):
        return [np.asarray(c, dtype=float) for c in control]
    if np.isscalar(control):
        return [np.array([float(control)])]
    return [np.asarray(control, dtype=float)]


def _sumsq(arrays):
    return sum(float(np.sum(a * a)) for a in arrays)


def control_cost(control, cspec):
    """C(g) for one control slice (float, vector, or tuple of matrices)."""
    if cspec.kind == "none":
        return 0.0
    arrays = _ctrl_arrays(control)
    if cspec.kind == "quadratic":
        return cspec.beta * _sumsq(arrays)
    if cspec.kind == "exp_frobenius":
        return math.exp(cspec.beta * _sumsq(arrays)) - 1.0
    if cspec.kind == "anchored_norm":
        return cspec.beta * sum(float(np.sum((a - cspec.anchor) ** 2)) for a in arrays)
    if cspec.kind == "fixed_norm":
        gap = _sumsq(arrays) - cspec.target_norm
        return cspec.beta * gap * gap
    raise ValueError(f"unknown cost kind '{cspec.kind}'")


def control_cost_grad(control, cspec):
    """dC/dg with the same structure as the control slice."""
    scalar = np.isscalar(control)
    arrays = _ctrl_arrays(control)
    if cspec.kind == "none":
        grads = [np.zeros_like(a) for a in arrays]
    elif cspec.kind == "quadratic":
        grads = [2.0 * cspec.beta * a for a in arrays]
    elif cspec.kind == "exp_frobenius":
        factor = 2.0 * cspec.beta * math.exp(cspec.beta * _sumsq(arrays))
        grads = [factor * a for a in arrays]
    elif cspec.kind == "anchored_norm":
        grads = [2.0 * cspec.beta * (a - cspec.anchor) for a in arrays]
    elif cspec.kind == "fixed_norm":
        factor = 4.0 * cspec.beta * (_sumsq(arrays) - cspec.target_norm)
        grads = [factor * a for a in arrays]
    else:
        raise ValueError(f"unknown cost kind '{cspec.kind}'")
    if control is None:
        return None
    if isinstance(control, tuple):
        return tuple(grads)
    if scalar:
        return float(grads[0][0])
    return grads[0]


@dataclass
class ValueSpec:
    """Parameters of the value functional.

    gamma discounts per unit time (gamma^t with t in the dynamics' units);
    eta converts performance into reward units; horizon is informational
    (the grid comes from the DynamicsSpec).  mode selects the discounted
    integral (default) or the undiscounted per-step sum described above.
    """

    gamma: float = 0.99
    eta: float = 1.0
    cost: CostSpec = field(default_factory=CostSpec)
    horizon: float | None = None
    mode: str = "discounted_integral"

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.mode not in ("discounted_integral", "per_step_sum"):
            raise ValueError(f"unknown value mode '{self.mode}'")


def _value_weights(vspec, dspec):
    """(pw, cw): performance weights on states 0..N, cost weights on steps 0..N-1."""
    n = dspec.n_steps
    if vspec.mode == "per_step_sum":
        pw = np.ones(n + 1)
        pw[0] = 0.0
        return pw, np.zeros(n)
    t = np.arange(n) * dspec.dt
    disc = np.exp(t * math.log(vspec.gamma)) if vspec.gamma < 1.0 else np.ones(n)
    pw = np.zeros(n + 1)
    pw[:n] = dspec.dt * vspec.eta * disc
    return pw, dspec.dt * disc


def value(trajectory, schedule, vspec, dspec):
    """V for a recorded trajectory under its schedule."""
    pw, cw = _value_weights(vspec, dspec)
    total = -float(np.dot(pw, trajectory.losses))
    if schedule is not None and schedule.kind != "init_weights" and vspec.cost.kind != "none":
        n = dspec.n_steps
        start = 0
        while start < n:
            stop = min(start + schedule.segment, n)
            c = control_cost(schedule.at(start), vspec.cost)
            if c != 0.0:
                total -= c * float(np.sum(cw[start:stop]))
            start = stop
    return total


def evaluate_value(dspec, task, schedule, vspec, state0=None):
    """Forward-only objective evaluation (integrate + value)."""
    traj = dyn.integrate(dspec, schedule, task, state0=state0)
    return value(traj, schedule, vspec, dspec)


# --- structure-generic arithmetic over control slices ------------------------


def _slice_axpy(base, add, factor):
    """base + factor*add for float / array / tuple slices (None treated as zero)."""
    if add is None:
        return base
    if base is None:
        return _slice_scale(add, factor)
    if isinstance(base, tuple):
        return tuple(_slice_axpy(b, a, factor) for b, a in zip(base, add))
    return base + factor * add


def _slice_scale(x, factor):
    if x is None:
        return None
    if isinstance(x, tuple):
        return tuple(_slice_scale(v, factor) for v in x)
    return factor * x


def grad_value(dspec, task, schedule, vspec, state0=None):
    """V and dV/d(schedule) by one adjoint sweep; also returns the trajectory.

    The gradient has exactly the structure of schedule.values (segment sums
    for series kinds, weight arrays for init_weights).  Bounds on the
    schedule do not enter: the derivative is of the unconstrained objective.
    """
    traj = dyn.integrate(dspec, schedule, task, state0=state0)
    total = value(traj, schedule, vspec, dspec)
    pw, cw = _value_weights(vspec, dspec)
    n = dspec.n_steps
    states = traj.states
    task_at = task.task_at if isinstance(task, dyn.TaskSchedule) else (lambda i: task)
    scale = dspec.dt / dspec.tau_w
    per_step = schedule is not None and schedule.kind != "init_weights"
    buffers = schedule.zero_grads() if per_step else None
    cost_active = per_step and vspec.cost.kind != "none"

    def zero_like_state(s):
        return tuple(0.0 if isinstance(w, float) else np.zeros_like(w) for w in s)

    # terminal contribution: the state at N is scored with the last control slice
    last_ctrl = schedule.at(n - 1) if per_step else None
    if pw[n] != 0.0:
        _, _, lgs, lgc = dyn.backward_step(dspec, states[n], last_ctrl, task_at(n - 1), zero_like_state(states[n]))
        adj = tuple(-pw[n] * g for g in lgs)
        if per_step and lgc is not None:
            schedule.add_grad(buffers, n - 1, _slice_scale(lgc, -pw[n]))
    else:
        adj = zero_like_state(states[n])

    for i in range(n - 1, -1, -1):
        ctrl = schedule.at(i) if per_step else None
        tsk = task_at(i)
        svjp, cvjp, lgs, lgc = dyn.backward_step(dspec, states[i], ctrl, tsk, adj)
        if per_step:
            g = _slice_scale(cvjp, scale)
            if pw[i] != 0.0:
                g = _slice_axpy(g, lgc, -pw[i])
            if cost_active and cw[i] != 0.0:
                g = _slice_axpy(g, control_cost_grad(ctrl, vspec.cost), -cw[i])
            if g is not None:
                schedule.add_grad(buffers, i, g)
        adj = tuple(
            a + scale * sv - (pw[i] * lg if pw[i] != 0.0 else 0.0)
            for a, sv, lg in zip(adj, svjp, lgs)
        )

    if per_step:
        return total, buffers, traj
    return total, tuple(np.asarray(a, dtype=float) for a in adj), traj


def maml_value_and_grad(dspec, tasks, schedule, steps_ahead=None):
    """Per-step-sum value over a task set, controlled through shared initial weights.

    Each task is rolled out independently from the same starting state;
    V = -sum_tasks sum_{i=1..steps} <loss_i>, and the gradient is the sum of
    the per-task adjoints at time zero.
    """
    spec = dspec if steps_ahead is None else replace(dspec, n_steps=int(steps_ahead))
    vspec = ValueSpec(gamma=1.0, eta=1.0, cost=CostSpec("none"), mode="per_step_sum")
    total = 0.0
    grads = None
    trajs = []
    for task in tasks:
        v, g, traj = grad_value(spec, task, schedule, vspec)
        total += v
        grads = g if grads is None else tuple(ga + gb for ga, gb in zip(grads, g))
        trajs.append(traj)
    return total, grads, trajs


@dataclass
class FdReport:
    """Outcome of a finite-difference probe of the adjoint gradient."""

    max_rel: float
    mean_rel: float
    entries: list

    def __str__(self):
        return f"fd check: max rel err {self.max_rel:.3e} over {len(self.entries)} coords"


def fd_check(dspec, task, schedule, vspec, coords=None, h=1e-6, rng=0):
    """Compare the adjoint gradient against central finite differences.

    `task` may be a TaskMoments (plain objective) or a sequence of them
    (per-step-sum objective through shared init weights).  `coords` is a list
    of (array_index, flat_index) pairs into schedule.values, or a count of
    coordinates to sample; by default up to twelve are sampled at random.  Bounds are stripped for the probe: the
    gradient is of the unconstrained objective and clamping would corrupt the
    difference quotient.  Relative error uses an absolute floor of 1e-7.
    """
    probe = ControlSchedule(
        kind=schedule.kind,
        values=tuple(v.copy() for v in schedule.values),
        n_steps=schedule.n_steps,
        segment=schedule.segment,
        bounds=None,
        basis=schedule.basis,
    )
    multi = isinstance(task, (list, tuple))

    def objective(s):
        if multi:
            vs = ValueSpec(gamma=1.0, eta=1.0, cost=CostSpec("none"), mode="per_step_sum")
            return sum(evaluate_value(dspec, t, s, vs) for t in task)
        return evaluate_value(dspec, task, s, vspec)

    if multi:
        _, grads, _ = maml_value_and_grad(dspec, task, probe)
    else:
        _, grads, _ = grad_value(dspec, task, probe, vspec)

    gen = np.random.default_rng(rng)
    if coords is None or isinstance(coords, int):
        want = 12 if coords is None else int(coords)
        coords = []
        sizes = [v.size for v in probe.values]
        total = sum(sizes)
        want = min(want, total)
        flat_picks = gen.choice(total, size=want, replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        for p in sorted(int(v) for v in flat_picks):
            ai = int(np.searchsorted(offsets, p, side="right") - 1)
            coords.append((ai, p - int(offsets[ai])))

    entries = []
    floor = 1e-7
    for ai, fi in coords:
        base = probe.values[ai].flat[fi]
        step = h * (1.0 + abs(base))

        def with_delta(delta):
            vals = tuple(v.copy() for v in probe.values)
            vals[ai].flat[fi] = base + delta
            return probe.with_values(vals)

        up = objective(with_delta(step))
        down = objective(with_delta(-step))
        numeric = (up - down) / (2.0 * step)
        analytic = float(grads[ai].flat[fi])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        entries.append(((ai, fi), analytic, numeric, rel))
    rels = [e[3] for e in entries]
    return FdReport(max_rel=max(rels), mean_rel=sum(rels) / len(rels), entries=entries)
