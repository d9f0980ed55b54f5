"""End-to-end acceptance gate: one test per shipped guarantee.

Run with -v for a pass/fail line per guarantee.  Scenario optimizations are
cached at module scope, so each distinct configuration is paid for once no
matter how many guarantees consult it.  Wall-clock budgets are asserted
where a guarantee carries one; they are generous next to observed times.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from learning_control.control import ControlSchedule, init_weights_control
from learning_control.dynamics import (
    DynamicsSpec,
    closed_form_single_layer,
    closed_form_single_neuron,
    initial_state,
    integrate,
    simulate_sgd,
)
from learning_control.experiments import (
    SCENARIOS,
    export_class_schedule,
    override_param,
    preset,
    run,
)
from learning_control.idx import IdxTensor, estimate_moments, parse_idx, serialize_idx
from learning_control.tasks import (
    class_mixture_moments,
    compose_block_tasks,
    correlated_gaussian_moments,
    two_gaussian_moments,
)
from learning_control.value import CostSpec, ValueSpec, fd_check


@pytest.fixture(scope="module")
def runs():
    """Memoized scenario runner shared by the whole gate."""
    cache = {}

    def get(name, seed=0, overrides=()):
        items = tuple(sorted(dict(overrides).items()))
        if (name, seed, items) not in cache:
            cfg = preset(name, seed=seed)
            for param, val in items:
                cfg = override_param(cfg, param, val)
            cache[(name, seed, items)] = run(cfg)
        return cache[(name, seed, items)]

    return get


def fd_cases():
    """One small randomized instance per dynamics kind that has an adjoint."""
    rng = np.random.default_rng(42)
    quad = lambda beta: CostSpec("quadratic", beta=beta)
    cases = []

    d = DynamicsSpec(kind="single_neuron", input_dim=1, output_dim=1, tau_w=1.6,
                     dt=0.05, n_steps=48, reg_lambda=0.08, init_mean=0.3)
    s = ControlSchedule.neutral("scalar_series", 48, segment=8)
    cases.append(("single_neuron", d, two_gaussian_moments(1.2, 0.8),
                  s.with_values((rng.uniform(-0.4, 0.6, 6),)),
                  ValueSpec(gamma=0.93, eta=1.0, cost=quad(0.2))))

    d = DynamicsSpec(kind="two_layer_baseline", input_dim=2, output_dim=2, hidden_dim=3,
                     dt=0.05, n_steps=40, reg_lambda=0.05, init_std=0.3, init_seed=1)
    cases.append(("two_layer_baseline", d,
                  correlated_gaussian_moments(0.9, 0.5, 1.0, 0.9, 0.7),
                  init_weights_control(initial_state(d)),
                  ValueSpec(gamma=0.95, eta=1.0, cost=CostSpec("none"))))

    d = DynamicsSpec(kind="gain_mod", input_dim=2, output_dim=2, hidden_dim=2,
                     dt=0.04, n_steps=50, reg_lambda=0.02, init_std=0.25, init_seed=2)
    s = ControlSchedule.neutral("matrix_pair_series", 50, segment=10, shapes=((2, 2), (2, 2)))
    cases.append(("gain_mod", d, correlated_gaussian_moments(1.3, 0.7, 1.0, 0.8, 0.75),
                  s.with_values((rng.normal(0.0, 0.25, (5, 2, 2)),
                                 rng.normal(0.0, 0.25, (5, 2, 2)))),
                  ValueSpec(gamma=0.9, eta=1.0, cost=quad(0.15))))

    block = compose_block_tasks([
        correlated_gaussian_moments(1.1, 0.6, 1.0, 0.9, 0.8, name="a"),
        correlated_gaussian_moments(0.8, 0.5, 0.9, 1.0, 0.65, name="b"),
    ])
    d = DynamicsSpec(kind="engagement", input_dim=4, output_dim=4, hidden_dim=3,
                     tau_w=1.5, dt=0.05, n_steps=40, init_std=0.2, init_seed=4)
    s = ControlSchedule.neutral("engagement_series", 40, segment=8, n_channels=2)
    cases.append(("engagement", d, block,
                  s.with_values((rng.uniform(0.5, 1.5, (5, 2)),)),
                  ValueSpec(gamma=0.9, eta=1.0, cost=CostSpec("exp_frobenius", beta=0.1))))

    mix = class_mixture_moments([[1.5, 0.0], [0.0, 1.0], [-0.7, -0.7]], 1.0)
    d = DynamicsSpec(kind="category_engagement", input_dim=2, output_dim=3, hidden_dim=3,
                     dt=0.04, n_steps=50, init_std=0.2, init_seed=5)
    s = ControlSchedule.neutral("category_series", 50, segment=10, n_channels=3)
    cases.append(("category_engagement", d, mix,
                  s.with_values((rng.uniform(0.5, 1.5, (5, 3)),)),
                  ValueSpec(gamma=0.95, eta=1.0,
                            cost=CostSpec("anchored_norm", beta=0.2, anchor=1.0))))

    d = DynamicsSpec(kind="lr_mod", input_dim=2, output_dim=2, hidden_dim=2,
                     dt=0.04, n_steps=50, init_std=0.15, init_seed=6)
    s = ControlSchedule.neutral("scalar_series", 50, segment=10)
    cases.append(("lr_mod", d, correlated_gaussian_moments(1.0, 0.6, 1.0, 0.9, 0.72),
                  s.with_values((rng.uniform(-0.3, 0.8, 5),)),
                  ValueSpec(gamma=0.9, eta=1.0, cost=quad(0.1))))

    d = DynamicsSpec(kind="nonlinear_taylor", input_dim=2, output_dim=2, hidden_dim=2,
                     dt=0.04, n_steps=40, reg_lambda=0.01, init_std=0.2, init_seed=7,
                     nonlinearity="tanh")
    s = ControlSchedule.neutral("matrix_pair_series", 40, segment=10, shapes=((2, 2), (2, 2)))
    cases.append(("nonlinear_taylor", d,
                  correlated_gaussian_moments(1.2, 0.7, 1.0, 0.9, 0.7),
                  s.with_values((rng.normal(0.0, 0.2, (4, 2, 2)),
                                 rng.normal(0.0, 0.2, (4, 2, 2)))),
                  ValueSpec(gamma=0.95, eta=1.0, cost=quad(0.05))))

    d = DynamicsSpec(kind="two_layer_baseline", input_dim=1, output_dim=1, hidden_dim=2,
                     dt=0.1, n_steps=6, init_std=0.3, init_seed=8)
    cases.append(("init_weights_multi_task", d,
                  [two_gaussian_moments(1.5, 0.7), two_gaussian_moments(0.8, 1.1)],
                  init_weights_control(initial_state(d)),
                  ValueSpec(gamma=1.0, eta=1.0, cost=CostSpec("none"), mode="per_step_sum")))
    return cases


def test_01_adjoint_gradients_match_finite_differences():
    t0 = time.monotonic()
    worst = {}
    for kind, d, task, sched, vspec in fd_cases():
        report = fd_check(d, task, sched, vspec, coords=10, rng=0)
        worst[kind] = report.max_rel
    bad = {k: v for k, v in worst.items() if not v < 1e-5}
    assert not bad, f"fd mismatch beyond 1e-5: {bad}"
    assert time.monotonic() - t0 < 30.0


def test_02_neutral_controls_reproduce_baseline_bitwise():
    plain = correlated_gaussian_moments(1.2, 0.8, 1.0, 0.9, 0.7)
    block = compose_block_tasks([
        correlated_gaussian_moments(1.1, 0.6, 1.0, 0.9, 0.8, name="a"),
        correlated_gaussian_moments(0.8, 0.5, 0.9, 1.0, 0.65, name="b"),
    ])
    mix = class_mixture_moments([[1.5, 0.0], [0.0, 1.0], [-0.7, -0.7]], 1.0)

    def spec(kind, i, o):
        return DynamicsSpec(kind=kind, input_dim=i, output_dim=o, hidden_dim=3,
                            tau_w=1.3, dt=0.02, n_steps=200, reg_lambda=0.01,
                            init_std=0.2, init_seed=7)

    pairs = [
        ("gain_mod", plain, 2, 2,
         ControlSchedule.neutral("matrix_pair_series", 200, segment=20,
                                 shapes=((3, 2), (2, 3)))),
        ("engagement", block, 4, 4,
         ControlSchedule.neutral("engagement_series", 200, segment=20, n_channels=2)),
        ("category_engagement", mix, 2, 3,
         ControlSchedule.neutral("category_series", 200, segment=20, n_channels=3)),
        ("lr_mod", plain, 2, 2,
         ControlSchedule.neutral("scalar_series", 200, segment=20)),
    ]
    for kind, task, i, o, sched in pairs:
        base = integrate(spec("two_layer_baseline", i, o), None, task)
        ctrl = integrate(spec(kind, i, o), sched, task)
        assert np.array_equal(base.losses, ctrl.losses), f"{kind}: losses drifted"
        for sb, sc in zip(base.states, ctrl.states):
            for wb, wc in zip(sb, sc):
                assert np.array_equal(wb, wc), f"{kind}: weights drifted"


def test_03_closed_forms_match_fine_euler_integration():
    t0 = time.monotonic()
    rng = np.random.default_rng(5)
    probes = np.linspace(0.4, 4.0, 10)
    idx = np.round(probes / 1e-3).astype(int)

    task = two_gaussian_moments(0.15, 0.15)
    d1 = DynamicsSpec(kind="single_neuron", input_dim=1, output_dim=1,
                      dt=1e-3, n_steps=4000, reg_lambda=0.005)
    s1 = ControlSchedule.neutral("scalar_series", 4000, segment=500, bounds=(0.0, 0.03))
    s1 = s1.with_values((rng.uniform(0.0, 0.03, 8),))
    exact1 = closed_form_single_neuron(s1, task, d1, probes)
    traj1 = integrate(d1, s1, task)
    euler1 = np.array([traj1.states[i][0] for i in idx])
    assert float(np.max(np.abs(euler1 - exact1) / np.abs(exact1))) < 1e-4

    task2 = correlated_gaussian_moments(0.14, 0.1, 0.09, 0.09, 0.75)
    d2 = DynamicsSpec(kind="single_layer", input_dim=2, output_dim=2,
                      dt=1e-3, n_steps=4000, reg_lambda=0.005)
    s2 = ControlSchedule.neutral("scalar_series", 4000, segment=1000, bounds=(0.0, 0.03))
    s2 = s2.with_values((rng.uniform(0.0, 0.03, 4),))
    exact2 = closed_form_single_layer(s2, task2, d2, probes)
    traj2 = integrate(d2, s2, task2)
    rel2 = max(
        float(np.linalg.norm(traj2.states[i][0] - exact2[k]) / np.linalg.norm(exact2[k]))
        for k, i in enumerate(idx)
    )
    assert rel2 < 1e-4
    assert time.monotonic() - t0 < 10.0


def test_04_two_layer_baseline_reaches_the_regression_solution():
    t0 = time.monotonic()
    task = correlated_gaussian_moments(2.0, 1.0, 1.0, 1.0, 0.8)
    d = DynamicsSpec(kind="two_layer_baseline", input_dim=2, output_dim=2, hidden_dim=4,
                     dt=0.02, n_steps=4000, reg_lambda=0.0, init_std=0.05, init_seed=3)
    w1, w2 = integrate(d, None, task).states[-1]
    target = task.sigma_xy.T @ np.linalg.inv(task.sigma_x)
    assert float(np.linalg.norm(w2 @ w1 - target)) < 1e-3
    assert time.monotonic() - t0 < 20.0


def test_05_ode_losses_stay_within_three_sds_of_sgd(runs):
    t0 = time.monotonic()
    res = runs("sgd_validation", overrides={"n_seeds": 20})
    assert res.summaries["sgd_seeds"] == 20
    assert res.summaries["sgd_max_z"] < 3.0
    assert time.monotonic() - t0 < 60.0


def test_06_effort_tracks_horizon_noise_and_price(runs):
    t0 = time.monotonic()
    base = runs("single_neuron_effort")
    assert base.V_control > base.V_baseline
    assert base.summaries["gain_mean_first_quarter"] > base.summaries["gain_mean_last_quarter"]

    effort = lambda ov: runs("single_neuron_effort", overrides=ov).summaries["effort_integral"]
    by_gamma = [effort({"value.gamma": g}) for g in (0.3, 0.5, 0.7, 0.8, 0.9)]
    assert all(b >= a for a, b in zip(by_gamma, by_gamma[1:])), by_gamma

    by_sigma = [effort({"sigma": s}) for s in (0.5, 0.75, 1.0, 1.25, 1.5)]
    assert all(b <= a for a, b in zip(by_sigma, by_sigma[1:])), by_sigma

    by_beta = [effort({"value.cost.beta": b}) for b in (0.1, 0.2, 0.3, 0.45, 0.6)]
    assert all(b <= a for a, b in zip(by_beta, by_beta[1:])), by_beta
    assert time.monotonic() - t0 < 600.0


def test_07_every_preset_trace_is_monotone_from_its_baseline(runs):
    for name in SCENARIOS:
        res = runs(name)
        V = res.trace.V
        assert all(b >= a for a, b in zip(V, V[1:])), f"{name}: descending V trace"
        assert abs(V[0] - res.V_baseline) <= 1e-12, f"{name}: trace does not start at baseline"


def test_08_longer_lookahead_improves_initial_weights(runs):
    t0 = time.monotonic()
    for seed in range(3):
        row = [
            runs("maml_multistep", seed=seed,
                 overrides={"steps_ahead": sa}).summaries["eval_cumulative_loss"]
            for sa in (1, 5, 20)
        ]
        assert row[1] <= row[0] and row[2] <= row[1], f"seed {seed}: {row}"
    assert time.monotonic() - t0 < 300.0


def test_09_engagement_schedules_follow_the_curriculum(runs):
    t0 = time.monotonic()
    hits = 0
    for seed in range(5):
        s = runs("task_engagement", seed=seed).summaries
        pk, od = s["psi_peak_times"], s["difficulty_order"]
        if all(pk[od[i]] < pk[od[i + 1]] for i in range(len(od) - 1)):
            hits += 1
    assert hits >= 3, f"easiest-first peak ordering in only {hits}/5 seeds"

    anchored = runs("task_engagement", overrides={
        "value.cost.kind": "anchored_norm", "value.cost.beta": 0.1, "value.cost.anchor": 1.0,
    })
    assert all(m >= 0.5 for m in anchored.summaries["psi_mean"]), anchored.summaries["psi_mean"]
    assert time.monotonic() - t0 < 600.0


def test_10_control_damps_post_switch_loss_peaks(runs):
    t0 = time.monotonic()
    s = runs("task_switch").summaries
    pc, pb = s["peaks_controlled"], s["peaks_baseline"]
    assert all(pc[i + 1] <= pc[i] for i in range(3)), pc
    assert all(c <= b for c, b in zip(pc, pb))
    assert s["loss_integral_controlled"] < s["loss_integral_baseline"]
    assert time.monotonic() - t0 < 300.0


def test_11_plateaus_detected_and_cut_short_by_rate_control(runs):
    t0 = time.monotonic()
    s = runs("lr_bilevel").summaries
    assert s["n_plateaus"] >= 3
    assert s["time_to_tenth_speedup"] >= 0.2
    assert time.monotonic() - t0 < 300.0


def test_12_taylor_rollouts_converge_to_sampled_runs(runs):
    t0 = time.monotonic()
    cfg = preset("nonlinear_approx")
    d0 = cfg.dynamics
    task = correlated_gaussian_moments(*cfg.params["task"])
    shapes = ((d0.hidden_dim, d0.input_dim), (d0.output_dim, d0.hidden_dim))
    gaps = []
    for scale in (1e-1, 1e-2, 1e-3):
        d = replace(d0, init_std=scale, n_steps=60)
        s = ControlSchedule.neutral("matrix_pair_series", 60, segment=20, shapes=shapes)
        traj = integrate(d, s, task)
        gaps.append(np.mean([
            np.mean(np.abs(traj.losses - simulate_sgd(d, s, task, 2048, seed=seed).losses))
            for seed in (11, 12, 13)
        ]))
    assert gaps[1] < gaps[0] and gaps[2] < gaps[1], gaps

    s = runs("nonlinear_approx").summaries
    assert s["sampled_loss_integral_controlled"] < s["sampled_loss_integral_baseline"]
    assert time.monotonic() - t0 < 600.0


def test_13_idx_round_trip_and_class_export_exactness():
    rng = np.random.default_rng(7)
    images = rng.uniform(0.0, 1.0, size=(30, 6, 6))
    labels = np.asarray([0, 1, 2] * 10, dtype=np.uint8)
    raw = serialize_idx(IdxTensor(dtype_code=0x0E, data=images))
    assert serialize_idx(parse_idx(raw)) == raw
    lab_raw = serialize_idx(IdxTensor(dtype_code=0x08, data=labels))
    assert parse_idx(lab_raw).data.tolist() == labels.tolist()

    task, counts = estimate_moments(images, labels, out_size=3)
    assert counts == {0: 10, 1: 10, 2: 10}
    assert abs(float(np.trace(task.sigma_y)) - 1.0) <= 1e-9
    for mat in (task.sigma_x, task.sigma_y):
        assert float(np.min(np.linalg.eigvalsh(mat))) >= -1e-9

    sched = export_class_schedule(np.ones((4, 10)), 256)
    assert sched.sum(axis=1).tolist() == [256] * 4
    assert sched[0].tolist() == [26] * 6 + [25] * 4
