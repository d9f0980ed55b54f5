"""Scenario registry: preset experiments over the controlled learning dynamics.

Each scenario bundles a task family, a dynamics kind, a value functional, and
an optimizer into a RunConfig; run() rolls out the uncontrolled baseline,
optimizes the control schedule, rolls out the controlled system, and collects
scalar summaries (effort integrals, time-to-loss thresholds, switch peaks,
engagement peak times, plateau counts...).

Horizons here are deliberately short: the phenomena of interest (front-loaded
control, curricula, post-switch adaptation, rich-regime plateaus) survive
rescaling of the time axis, and short unrolls keep the whole registry
runnable in minutes on a laptop.  Docstrings on the individual presets say
what was rescaled.
"""

import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from .control import ControlSchedule, init_weights_control
from .errors import ConfigError, LearningControlError
from .optimizer import OptimizerSpec, OptTrace, optimize
from .tasks import (
    class_mixture_moments,
    compose_block_tasks,
    correlated_gaussian_moments,
    linear_regression_floor,
    semantic_moments,
    two_gaussian_moments,
)
from .value import CostSpec, ValueSpec, evaluate_value

SCENARIOS = (
    "single_neuron_effort",
    "effort_allocation",
    "task_switch",
    "task_engagement",
    "category_engagement",
    "class_proportion",
    "maml_multistep",
    "lr_bilevel",
    "nonlinear_approx",
    "sgd_validation",
)


# --- derived analyses --------------------------------------------------------


def task_switch_schedule(tasks, period_steps, n_steps):
    """Alternating task selector: `period_steps` per task, cycling in order.

    The period must divide the total step count (ragged tails would make the
    per-switch statistics ambiguous) and cannot exceed it.
    """
    period_steps = int(period_steps)
    n_steps = int(n_steps)
    if period_steps > n_steps:
        raise ValueError(f"switch period {period_steps} exceeds the horizon {n_steps}")
    if n_steps % period_steps != 0:
        raise ValueError(f"switch period {period_steps} does not divide n_steps {n_steps}")
    return dyn.TaskSchedule(tasks=list(tasks), period_steps=period_steps, n_steps=n_steps)


def post_switch_peaks(losses, switch_steps, n_steps=None):
    """Maximum loss inside each post-switch window; one entry per switch."""
    losses = np.asarray(losses, dtype=float)
    stops = list(switch_steps[1:]) + [losses.size if n_steps is None else n_steps + 1]
    return [float(np.max(losses[s:e])) for s, e in zip(switch_steps, stops)]


def export_class_schedule(phi, batch_size):
    """Per-step integer class counts realizing engagement weights as batch mix.

    `phi` is a ControlSchedule (category kind) or an (steps, classes) array of
    nonnegative weights.  Each row is turned into quotas batch_size*phi/sum(phi)
    and rounded by largest remainder, so every row sums to batch_size exactly;
    remainder ties go to the lower class index.  An all-zero row falls back to
    the uniform mix with a warning.
    """
    if isinstance(phi, ControlSchedule):
        phi = phi.expand()[0]
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    if np.any(phi < 0):
        raise ValueError("class engagement weights must be nonnegative")
    batch_size = int(batch_size)
    n, c = phi.shape
    counts = np.empty((n, c), dtype=int)
    warned = False
    for i in range(n):
        row = phi[i]
        total = row.sum()
        if total == 0.0:
            if not warned:
                warnings.warn("all-zero class weights at some steps; using the uniform mix there")
                warned = True
            row = np.ones(c)
            total = float(c)
        quota = row * (batch_size / total)
        base = np.floor(quota).astype(int)
        short = batch_size - int(base.sum())
        frac = quota - base
        order = np.lexsort((np.arange(c), -frac))
        base[order[:short]] += 1
        counts[i] = base
    return counts


def difficulty_order(tasks):
    """Rank tasks by their best achievable linear-regression loss.

    Returns (order, floors): `order` lists task indices easiest first, and
    `floors` the per-task optimal losses in input order.  Ranking is stable
    under permutation of the input (argsort of the floors).
    """
    floors = np.array([linear_regression_floor(t) for t in tasks])
    order = [int(i) for i in np.argsort(floors, kind="stable")]
    return order, floors


def detect_plateaus(times, losses, slope_frac=0.01, min_frac=0.05, smooth_frac=0.01):
    """Intervals where the loss curve is flat relative to its steepest descent.

    Flat means |dL/dt| below `slope_frac` of the curve's own maximum slope
    magnitude (after light boxcar smoothing, window `smooth_frac` of the
    sample count); intervals shorter than `min_frac` of the time span are
    dropped.  The thresholds are this package's instrument, not a canonical
    definition; tune them per application.
    """
    times = np.asarray(times, dtype=float)
    losses = np.asarray(losses, dtype=float)
    n = losses.size
    w = max(1, int(round(n * smooth_frac)))
    if w > 1:
        pad = np.pad(losses, (w // 2, w - 1 - w // 2), mode="edge")
        smooth = np.convolve(pad, np.ones(w) / w, mode="valid")
    else:
        smooth = losses
    slope = np.gradient(smooth, times)
    peak = float(np.max(np.abs(slope)))
    swing = float(np.max(smooth) - np.min(smooth))
    # a curve whose total variation is at rounding level has no slope scale
    # to threshold against (np.gradient emits ~1e-16 noise on such input)
    if peak == 0.0 or swing <= 1e-12 * max(1.0, float(np.max(np.abs(smooth)))):
        return [(float(times[0]), float(times[-1]))]
    flat = np.abs(slope) < slope_frac * peak
    min_len = min_frac * (times[-1] - times[0])
    out = []
    start = None
    for i, ok in enumerate(flat):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            if times[i - 1] - times[start] >= min_len:
                out.append((float(times[start]), float(times[i - 1])))
            start = None
    if start is not None and times[-1] - times[start] >= min_len:
        out.append((float(times[start]), float(times[-1])))
    return out


def time_to_fraction(times, losses, frac):
    """First time the loss falls to `frac` of its initial value (inf if never)."""
    losses = np.asarray(losses, dtype=float)
    target = frac * losses[0]
    hits = np.nonzero(losses <= target)[0]
    if hits.size == 0:
        return math.inf
    return float(np.asarray(times)[hits[0]])


def total_control_effort(schedule, dspec):
    """Time integral of the control vector norm over the horizon."""
    if schedule is None or schedule.kind == "init_weights":
        return 0.0
    total = 0.0
    step = 0
    while step < dspec.n_steps:
        run_len = min(schedule.segment, dspec.n_steps - step)
        total += schedule.control_norm_at(step) * run_len * dspec.dt
        step += run_len
    return total


# --- configuration -----------------------------------------------------------

_CORR5 = ("mu1", "mu2", "sigma1", "sigma2", "flip_p")

_PARAMS = {
    "single_neuron_effort": {"mu": 1.0, "sigma": 1.0, "segment": 30, "g_lo": 0.0, "g_hi": 0.5},
    "sgd_validation": {
        "mu": 1.0,
        "sigma": 1.0,
        "segment": 25,
        "g_lo": 0.0,
        "g_hi": 0.5,
        "batch_size": 128,
        "n_seeds": 5,
        "stride": 10,
    },
    "effort_allocation": {
        "task_easy": (3.0, 1.0, 1.0, 1.0, 0.8),
        "task_hard": (1.0, 0.5, 1.0, 1.0, 0.62),
        "segment": 40,
        "g_lo": -0.5,
        "g_hi": 1.0,
    },
    "task_switch": {
        # mirror pair: b is a with the input correlation sign flipped, so both
        # halves of the cycle are equally hard and post-switch peaks compare cleanly
        "task_a": (3.0, 1.0, 1.0, 1.0, 0.8),
        "task_b": (3.0, 1.0, 1.0, 1.0, 0.2),
        "switch_period": 500,
        "segment": 25,
        "g_lo": -0.5,
        "g_hi": 1.0,
    },
    "task_engagement": {
        # speeds fall ~3x per task (whole-input scaling, which leaves the
        # regression floor alone) while flip_p keeps the floors ranked
        "tasks": ((3.0, 1.5, 1.0, 1.0, 0.9), (1.65, 0.825, 0.55, 0.55, 0.75), (0.9, 0.45, 0.3, 0.3, 0.62)),
        "segment": 20,
        "g_lo": 0.0,
        "g_hi": 1.5,
    },
    "category_engagement": {
        "class_means": ((3.0, 0.0), (0.0, 1.5), (-0.8, -0.8)),
        "class_sigma": 1.0,
        "segment": 40,
        "g_lo": 0.0,
        "g_hi": 2.0,
    },
    "class_proportion": {
        "class_means": ((3.0, 0.0), (0.0, 1.5), (-0.8, -0.8)),
        "class_sigma": 1.0,
        "segment": 40,
        "g_lo": 0.0,
        "g_hi": 2.0,
        "batch_size": 256,
    },
    "maml_multistep": {
        "tasks": ((2.0, 0.8), (1.2, 1.0), (0.7, 1.2)),
        "steps_ahead": 0,
        "eval_steps": 20,
    },
    "lr_bilevel": {"levels": 4, "segment": 30, "g_lo": -0.5, "g_hi": 4.0},
    "nonlinear_approx": {
        "task": (2.0, 1.0, 1.0, 1.0, 0.85),
        "segment": 20,
        "g_lo": -0.5,
        "g_hi": 1.0,
        "batch_size": 256,
    },
}


@dataclass
class RunConfig:
    """Everything one scenario run needs.

    `seed` governs the drawn initial weights (it replaces the dynamics spec's
    init_seed) and any sampling the scenario does.  `params` holds the
    scenario-specific knobs; unknown keys are rejected and missing ones take
    the registered defaults.  Output files land in out_dir/run_name when
    out_dir is set.
    """

    scenario: str
    dynamics: dyn.DynamicsSpec
    value: ValueSpec
    optimizer: OptimizerSpec
    seed: int = 0
    params: dict = field(default_factory=dict)
    out_dir: str | None = None
    run_name: str = ""
    force: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario '{self.scenario}' (choose from {', '.join(SCENARIOS)})")
        defaults = _PARAMS[self.scenario]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ConfigError(f"scenario '{self.scenario}' does not take parameter(s) {sorted(unknown)}")
        self.params = {**defaults, **self.params}
        self.seed = int(self.seed)


@dataclass
class RunResult:
    scenario: str
    V_baseline: float
    V_control: float
    trajectories: dict
    schedule: ControlSchedule
    trace: OptTrace
    summaries: dict
    out_dir: str | None = None


# --- scenario builders -------------------------------------------------------


def _corr(p, name="correlated_gaussian"):
    return correlated_gaussian_moments(*p, name=name)


def _seeded(cfg):
    return replace(cfg.dynamics, init_seed=cfg.seed)


def _gain_shapes(d):
    return ((d.hidden_dim, d.input_dim), (d.output_dim, d.hidden_dim))


def _build_neuron(cfg):
    d = _seeded(cfg)
    p = cfg.params
    task = two_gaussian_moments(p["mu"], p["sigma"])
    sched = ControlSchedule.neutral(
        "scalar_series", d.n_steps, segment=int(p["segment"]), bounds=(p["g_lo"], p["g_hi"])
    )
    return d, task, sched


def _build_allocation(cfg):
    d = _seeded(cfg)
    p = cfg.params
    task = compose_block_tasks([_corr(p["task_easy"], "easy"), _corr(p["task_hard"], "hard")])
    sched = ControlSchedule.neutral(
        "matrix_pair_series",
        d.n_steps,
        segment=int(p["segment"]),
        shapes=_gain_shapes(d),
        bounds=(p["g_lo"], p["g_hi"]),
    )
    return d, task, sched


def _build_switch(cfg):
    d = _seeded(cfg)
    p = cfg.params
    tasks = [_corr(p["task_a"], "task_a"), _corr(p["task_b"], "task_b")]
    selector = task_switch_schedule(tasks, int(p["switch_period"]), d.n_steps)
    sched = ControlSchedule.neutral(
        "matrix_pair_series",
        d.n_steps,
        segment=int(p["segment"]),
        shapes=_gain_shapes(d),
        bounds=(p["g_lo"], p["g_hi"]),
    )
    return d, selector, sched


def _build_engagement(cfg):
    d = _seeded(cfg)
    p = cfg.params
    task = compose_block_tasks([_corr(t, f"task{k}") for k, t in enumerate(p["tasks"])])
    sched = ControlSchedule.neutral(
        "engagement_series",
        d.n_steps,
        segment=int(p["segment"]),
        n_channels=task.blocks.n_tasks,
        bounds=(p["g_lo"], p["g_hi"]),
    )
    return d, task, sched


def _build_category(cfg):
    d = _seeded(cfg)
    p = cfg.params
    task = class_mixture_moments([list(m) for m in p["class_means"]], p["class_sigma"])
    sched = ControlSchedule.neutral(
        "category_series",
        d.n_steps,
        segment=int(p["segment"]),
        n_channels=task.output_dim,
        bounds=(p["g_lo"], p["g_hi"]),
    )
    return d, task, sched


def _build_maml(cfg):
    d = _seeded(cfg)
    p = cfg.params
    if int(p["steps_ahead"]) > 0:
        d = replace(d, n_steps=int(p["steps_ahead"]))
    tasks = [two_gaussian_moments(mu, s, name=f"pair{k}") for k, (mu, s) in enumerate(p["tasks"])]
    sched = init_weights_control(dyn.initial_state(d))
    return d, tasks, sched


def _build_bilevel(cfg):
    d = _seeded(cfg)
    p = cfg.params
    task = semantic_moments(int(p["levels"]))
    if (d.input_dim, d.output_dim) != (task.input_dim, task.output_dim):
        raise ConfigError(
            f"dynamics dims {d.input_dim}x{d.output_dim} do not fit the depth-{p['levels']} "
            f"hierarchy ({task.input_dim}x{task.output_dim})"
        )
    sched = ControlSchedule.neutral(
        "scalar_series", d.n_steps, segment=int(p["segment"]), bounds=(p["g_lo"], p["g_hi"])
    )
    return d, task, sched


def _build_nonlinear(cfg):
    d = _seeded(cfg)
    p = cfg.params
    task = _corr(p["task"])
    sched = ControlSchedule.neutral(
        "matrix_pair_series",
        d.n_steps,
        segment=int(p["segment"]),
        shapes=_gain_shapes(d),
        bounds=(p["g_lo"], p["g_hi"]),
    )
    return d, task, sched


_BUILDERS = {
    "single_neuron_effort": _build_neuron,
    "sgd_validation": _build_neuron,
    "effort_allocation": _build_allocation,
    "task_switch": _build_switch,
    "task_engagement": _build_engagement,
    "category_engagement": _build_category,
    "class_proportion": _build_category,
    "maml_multistep": _build_maml,
    "lr_bilevel": _build_bilevel,
    "nonlinear_approx": _build_nonlinear,
}


# --- presets -----------------------------------------------------------------


def preset(name, seed=0, out_dir=None, run_name=None, **param_overrides):
    """RunConfig for a named scenario with tuned desk-scale defaults.

    Horizons are rescaled from the much longer originals; every preset runs
    in seconds to low minutes.  `param_overrides` update the scenario params;
    dynamics/value/optimizer fields are best adjusted on the returned config
    with dataclasses.replace or override_param.
    """
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario '{name}' (choose from {', '.join(SCENARIOS)})")
    builder = _PRESET_SPECS[name]
    dspec, vspec, ospec = builder()
    return RunConfig(
        scenario=name,
        dynamics=dspec,
        value=vspec,
        optimizer=ospec,
        seed=seed,
        params=dict(param_overrides),
        out_dir=out_dir,
        run_name=name if run_name is None else run_name,
    )


def _preset_single_neuron():
    d = dyn.DynamicsSpec(kind="single_neuron", input_dim=1, output_dim=1, dt=0.01, n_steps=3000, tau_w=1.0, reg_lambda=0.1)
    v = ValueSpec(gamma=0.99, eta=1.0, cost=CostSpec("quadratic", beta=0.3))
    o = OptimizerSpec(alpha_g=10.0, iters=60)
    return d, v, o


def _preset_sgd_validation():
    d = dyn.DynamicsSpec(kind="single_neuron", input_dim=1, output_dim=1, dt=0.01, n_steps=500, tau_w=1.0, reg_lambda=0.1)
    v = ValueSpec(gamma=0.99, eta=1.0, cost=CostSpec("quadratic", beta=0.3))
    o = OptimizerSpec(alpha_g=10.0, iters=20)
    return d, v, o


def _preset_allocation():
    d = dyn.DynamicsSpec(
        kind="gain_mod", input_dim=4, output_dim=4, hidden_dim=4, dt=0.02, n_steps=800, reg_lambda=0.01, init_std=0.1
    )
    v = ValueSpec(gamma=0.99, eta=1.0, cost=CostSpec("quadratic", beta=0.05))
    o = OptimizerSpec(alpha_g=2.0, iters=30)
    return d, v, o


def _preset_switch():
    d = dyn.DynamicsSpec(
        kind="gain_mod", input_dim=2, output_dim=2, hidden_dim=4, dt=0.02, n_steps=3000, reg_lambda=0.01, init_std=0.1
    )
    v = ValueSpec(gamma=0.995, eta=1.0, cost=CostSpec("quadratic", beta=0.05))
    o = OptimizerSpec(alpha_g=2.0, iters=40)
    return d, v, o


def _preset_engagement():
    # init well below the regression solution so every block has a visible
    # rise phase, and an exp-of-total cost so engaging tasks one at a time
    # beats engaging them all at once
    d = dyn.DynamicsSpec(
        kind="engagement", input_dim=6, output_dim=6, hidden_dim=6, dt=0.025, n_steps=600, tau_w=2.0, init_std=0.08
    )
    v = ValueSpec(gamma=0.9, eta=1.0, cost=CostSpec("exp_frobenius", beta=0.4))
    o = OptimizerSpec(alpha_g=0.04, iters=150, update_rule="adaptive_moments")
    return d, v, o


def _preset_category():
    d = dyn.DynamicsSpec(
        kind="category_engagement", input_dim=2, output_dim=3, hidden_dim=4, dt=0.02, n_steps=800, init_std=0.1
    )
    v = ValueSpec(gamma=0.99, eta=1.0, cost=CostSpec("anchored_norm", beta=0.1, anchor=1.0))
    o = OptimizerSpec(alpha_g=1.5, iters=25)
    return d, v, o


def _preset_class_proportion():
    d = dyn.DynamicsSpec(
        kind="category_engagement", input_dim=2, output_dim=3, hidden_dim=4, dt=0.02, n_steps=800, init_std=0.1
    )
    v = ValueSpec(gamma=0.99, eta=1.0, cost=CostSpec("fixed_norm", beta=0.05, target_norm=3.0))
    o = OptimizerSpec(alpha_g=1.5, iters=25)
    return d, v, o


def _preset_maml():
    d = dyn.DynamicsSpec(
        kind="two_layer_baseline", input_dim=1, output_dim=1, hidden_dim=3, dt=0.1, n_steps=5, init_std=0.3
    )
    v = ValueSpec(gamma=1.0, eta=1.0, cost=CostSpec("none"), mode="per_step_sum")
    o = OptimizerSpec(alpha_g=0.05, iters=120)
    return d, v, o


def _preset_bilevel():
    d = dyn.DynamicsSpec(
        kind="lr_mod", input_dim=8, output_dim=15, hidden_dim=8, dt=0.02, n_steps=600, init_std=1e-4
    )
    v = ValueSpec(gamma=1.0, eta=1.0, cost=CostSpec("quadratic", beta=1e-3))
    o = OptimizerSpec(alpha_g=0.5, iters=30)
    return d, v, o


def _preset_nonlinear():
    d = dyn.DynamicsSpec(
        kind="nonlinear_taylor",
        input_dim=2,
        output_dim=2,
        hidden_dim=4,
        dt=0.05,
        n_steps=320,
        reg_lambda=0.01,
        init_std=0.1,
        nonlinearity="tanh",
    )
    v = ValueSpec(gamma=0.99, eta=1.0, cost=CostSpec("quadratic", beta=0.05))
    o = OptimizerSpec(alpha_g=1.0, iters=30)
    return d, v, o


_PRESET_SPECS = {
    "single_neuron_effort": _preset_single_neuron,
    "sgd_validation": _preset_sgd_validation,
    "effort_allocation": _preset_allocation,
    "task_switch": _preset_switch,
    "task_engagement": _preset_engagement,
    "category_engagement": _preset_category,
    "class_proportion": _preset_class_proportion,
    "maml_multistep": _preset_maml,
    "lr_bilevel": _preset_bilevel,
    "nonlinear_approx": _preset_nonlinear,
}


def override_param(config, name, value, run_suffix=""):
    """New config with one dotted field replaced, e.g. "value.gamma" or "sigma".

    A bare name that is not a RunConfig field is looked up in the scenario
    params.  `run_suffix` extends run_name so sweep outputs never collide.
    """
    parts = name.split(".")
    suffix = run_suffix.replace(os.sep, "_")

    def rebuild(obj, path):
        head = path[0]
        if isinstance(obj, dict):
            if head not in obj:
                raise ConfigError(f"unknown parameter '{head}' in '{name}'")
            new = dict(obj)
            new[head] = value if len(path) == 1 else rebuild(obj[head], path[1:])
            return new
        if not hasattr(obj, head):
            raise ConfigError(f"'{type(obj).__name__}' has no field '{head}' (from '{name}')")
        if len(path) == 1:
            return replace(obj, **{head: value})
        return replace(obj, **{head: rebuild(getattr(obj, head), path[1:])})

    if len(parts) == 1 and parts[0] not in RunConfig.__dataclass_fields__:
        # falls into scenario params; the config's own validation rejects unknown keys
        cfg = replace(config, params={**config.params, parts[0]: value})
    else:
        cfg = rebuild(config, parts)
    if suffix:
        cfg = replace(cfg, run_name=os.path.join(cfg.run_name, suffix) if cfg.run_name else suffix)
    return cfg


# --- the run pipeline --------------------------------------------------------


def _per_step_valuespec():
    return ValueSpec(gamma=1.0, eta=1.0, cost=CostSpec("none"), mode="per_step_sum")


def _loss_integral(traj, dspec):
    return float(np.sum(traj.losses[: dspec.n_steps])) * dspec.dt


def _segment_mid_times(schedule, dspec, seg_indices):
    return [float((i * schedule.segment + 0.5 * schedule.segment) * dspec.dt) for i in seg_indices]


def run(config):
    """Execute one scenario: baseline, optimization, controlled rollout, summaries.

    Returns a RunResult; when config.out_dir is set the result is also written
    to disk (result.json, trajectory CSVs, schedule JSON, optimizer trace).
    """
    try:
        return _run_inner(config)
    except LearningControlError as err:
        err.args = (f"scenario '{config.scenario}': {err.args[0]}",) + err.args[1:]
        raise


def _run_inner(cfg):
    dspec, task, init_sched = _BUILDERS[cfg.scenario](cfg)
    init_sched = init_sched.project()
    multi = isinstance(task, (list, tuple))

    if multi:
        per_vs = _per_step_valuespec()
        v_baseline = sum(evaluate_value(dspec, t, init_sched, per_vs) for t in task)
    else:
        v_baseline = evaluate_value(dspec, task, init_sched, cfg.value)

    sched_opt, trace = optimize(dspec, task, cfg.value, cfg.optimizer, init_sched)
    v_control = trace.V[-1]
    if cfg.optimizer.backtracking and v_control < v_baseline - 1e-9:
        raise LearningControlError(
            f"value dropped under backtracking ({v_control} < {v_baseline}); optimizer contract broken"
        )

    trajectories = {}
    if multi:
        for k, t in enumerate(task):
            trajectories[f"baseline:{k}"] = dyn.integrate(dspec, init_sched, t)
            trajectories[f"controlled:{k}"] = dyn.integrate(dspec, sched_opt, t)
    else:
        trajectories["baseline"] = dyn.integrate(dspec, init_sched, task)
        trajectories["controlled"] = dyn.integrate(dspec, sched_opt, task)

    summaries = {
        "V_baseline": v_baseline,
        "V_control": v_control,
        "V_gain": v_control - v_baseline,
        "optimizer_iters_used": len(trace.V) - 1,
        "total_effort": total_control_effort(sched_opt, dspec),
    }
    if not multi:
        base = trajectories["baseline"]
        ctrl = trajectories["controlled"]
        for frac, tag in ((0.5, "half"), (0.1, "tenth")):
            summaries[f"time_to_{tag}_baseline"] = time_to_fraction(base.times, base.losses, frac)
            summaries[f"time_to_{tag}_controlled"] = time_to_fraction(ctrl.times, ctrl.losses, frac)
        summaries["loss_integral_baseline"] = _loss_integral(base, dspec)
        summaries["loss_integral_controlled"] = _loss_integral(ctrl, dspec)

    extra = _EXTRA_SUMMARIES.get(cfg.scenario)
    if extra is not None:
        summaries.update(extra(cfg, dspec, task, init_sched, sched_opt, trajectories))

    result = RunResult(
        scenario=cfg.scenario,
        V_baseline=v_baseline,
        V_control=v_control,
        trajectories=trajectories,
        schedule=sched_opt,
        trace=trace,
        summaries=summaries,
        out_dir=None,
    )
    if cfg.out_dir is not None:
        from .reporting import write_run_outputs

        result.out_dir = write_run_outputs(result, cfg)
    return result


# --- scenario-specific summaries ---------------------------------------------


def _sum_neuron(cfg, dspec, task, init_sched, sched, trajs):
    g = sched.expand()[0]
    quarter = dspec.n_steps // 4
    return {
        "gain_mean_first_quarter": float(np.mean(g[:quarter])),
        "gain_mean_last_quarter": float(np.mean(g[-quarter:])),
        "effort_integral": float(np.sum(g)) * dspec.dt,
    }


def _sum_sgd_validation(cfg, dspec, task, init_sched, sched, trajs):
    p = cfg.params
    n_seeds = int(p["n_seeds"])
    stride = int(p["stride"])
    ode = trajs["baseline"].losses
    checked = list(range(0, dspec.n_steps + 1, stride))
    out = {"sgd_seeds": n_seeds, "sgd_stride": stride}
    if n_seeds >= 2:
        runs = np.stack(
            [
                dyn.simulate_sgd(dspec, init_sched, task, int(p["batch_size"]), seed=[cfg.seed, 1000 + k]).losses
                for k in range(n_seeds)
            ]
        )
        mean = runs.mean(axis=0)
        sd = runs.std(axis=0, ddof=1)
        z = np.zeros(len(checked))
        for j, i in enumerate(checked):
            diff = abs(ode[i] - mean[i])
            z[j] = 0.0 if diff <= 1e-12 else diff / max(sd[i], 1e-300)
        out["sgd_max_z"] = float(np.max(z))
        out["sgd_checked_steps"] = len(checked)
    return out


def _sum_allocation(cfg, dspec, task, init_sched, sched, trajs):
    g1, g2 = sched.expand()
    shares = []
    for (i0, i1), (o0, o1) in zip(task.blocks.input_slices, task.blocks.output_slices):
        shares.append(float(np.sum(g1[:, :, i0:i1] ** 2) + np.sum(g2[:, o0:o1, :] ** 2)))
    total = sum(shares)
    order, floors = difficulty_order(
        [_corr(cfg.params["task_easy"]), _corr(cfg.params["task_hard"])]
    )
    return {
        "gain_energy_by_task": shares,
        "gain_share_by_task": [s / total if total > 0 else 0.0 for s in shares],
        "difficulty_order": order,
        "difficulty_floors": [float(f) for f in floors],
    }


def _sum_switch(cfg, dspec, selector, init_sched, sched, trajs):
    switches = selector.switch_steps
    return {
        "switch_steps": switches,
        "peaks_baseline": post_switch_peaks(trajs["baseline"].losses, switches, dspec.n_steps),
        "peaks_controlled": post_switch_peaks(trajs["controlled"].losses, switches, dspec.n_steps),
    }


def _sum_engagement(cfg, dspec, task, init_sched, sched, trajs):
    psi = sched.values[0]
    arg = [int(i) for i in np.argmax(psi, axis=0)]
    order, floors = difficulty_order([_corr(t) for t in cfg.params["tasks"]])
    return {
        "psi_peak_times": _segment_mid_times(sched, dspec, arg),
        "psi_mean": [float(m) for m in np.mean(psi, axis=0)],
        "difficulty_order": order,
        "difficulty_floors": [float(f) for f in floors],
    }


def _sum_category(cfg, dspec, task, init_sched, sched, trajs):
    phi = sched.values[0]
    arg = [int(i) for i in np.argmax(phi, axis=0)]
    return {
        "phi_peak_times": _segment_mid_times(sched, dspec, arg),
        "phi_mean": [float(m) for m in np.mean(phi, axis=0)],
    }


def _sum_class_proportion(cfg, dspec, task, init_sched, sched, trajs):
    out = _sum_category(cfg, dspec, task, init_sched, sched, trajs)
    counts = export_class_schedule(sched, int(cfg.params["batch_size"]))
    out["class_counts_first_step"] = [int(c) for c in counts[0]]
    out["class_counts_last_step"] = [int(c) for c in counts[-1]]
    out["class_counts_row_sum"] = int(counts[0].sum())
    return out


def _sum_maml(cfg, dspec, tasks, init_sched, sched, trajs):
    eval_steps = int(cfg.params["eval_steps"])
    espec = replace(dspec, n_steps=eval_steps)
    finals = []
    cumulative = 0.0
    for t in tasks:
        traj = dyn.integrate(espec, sched, t)
        finals.append(float(traj.losses[-1]))
        cumulative += float(np.sum(traj.losses[1:]))
    base_cumulative = 0.0
    for t in tasks:
        traj = dyn.integrate(espec, init_sched, t)
        base_cumulative += float(np.sum(traj.losses[1:]))
    return {
        "eval_steps": eval_steps,
        "eval_final_losses": finals,
        "eval_cumulative_loss": cumulative,
        "eval_cumulative_loss_baseline": base_cumulative,
        "train_steps_ahead": dspec.n_steps,
    }


def _sum_bilevel(cfg, dspec, task, init_sched, sched, trajs):
    base = trajs["baseline"]
    ctrl = trajs["controlled"]
    plateaus = detect_plateaus(base.times, base.losses)
    t_base = time_to_fraction(base.times, base.losses, 0.1)
    t_ctrl = time_to_fraction(ctrl.times, ctrl.losses, 0.1)
    speedup = 1.0 - t_ctrl / t_base if math.isfinite(t_base) and math.isfinite(t_ctrl) and t_base > 0 else 0.0
    return {
        "plateaus": plateaus,
        "n_plateaus": len(plateaus),
        "time_to_tenth_speedup": speedup,
    }


def _sum_nonlinear(cfg, dspec, task, init_sched, sched, trajs):
    batch = int(cfg.params["batch_size"])
    sgd_base = dyn.simulate_sgd(dspec, init_sched, task, batch, seed=[cfg.seed, 77])
    sgd_ctrl = dyn.simulate_sgd(dspec, sched, task, batch, seed=[cfg.seed, 77])
    trajs["sgd_baseline"] = sgd_base
    trajs["sgd_controlled"] = sgd_ctrl

    def weight_gap(a, b):
        acc = 0.0
        for sa, sb in zip(a.states, b.states):
            acc += math.sqrt(sum(float(np.sum((wa - wb) ** 2)) for wa, wb in zip(sa, sb)))
        return acc / len(a.states)

    return {
        "taylor_sgd_weight_gap": weight_gap(trajs["baseline"], sgd_base),
        "taylor_sgd_loss_gap": float(np.mean(np.abs(trajs["baseline"].losses - sgd_base.losses))),
        "sampled_loss_integral_baseline": _loss_integral(sgd_base, dspec),
        "sampled_loss_integral_controlled": _loss_integral(sgd_ctrl, dspec),
    }


_EXTRA_SUMMARIES = {
    "single_neuron_effort": _sum_neuron,
    "sgd_validation": _sum_sgd_validation,
    "effort_allocation": _sum_allocation,
    "task_switch": _sum_switch,
    "task_engagement": _sum_engagement,
    "category_engagement": _sum_category,
    "class_proportion": _sum_class_proportion,
    "maml_multistep": _sum_maml,
    "lr_bilevel": _sum_bilevel,
    "nonlinear_approx": _sum_nonlinear,
}
