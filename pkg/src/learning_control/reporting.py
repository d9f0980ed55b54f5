"""File outputs for completed runs: CSVs, result JSON, and SVG charts.

Everything written here is deterministic: identical inputs give byte-identical
files (no timestamps, no environment leakage), which makes outputs diffable
and lets tests pin them.  Floats are formatted with 17 significant digits so
they survive a parse round trip exactly.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .control import ControlSchedule
from .errors import ConfigError, DataFormatError
from .idx import _emit as _emit17
from .value import control_cost

TRAJECTORY_COLUMNS = ("step", "time", "loss", "reward", "cost", "net_reward", "w1_l1", "w1_l2", "w2_l1", "w2_l2", "g_l2")
TRACE_COLUMNS = ("iter", "V", "grad_norm", "alpha_used", "ms")


def _f(x):
    return format(float(x), ".17g")


def _norms(w):
    if w is None:
        return 0.0, 0.0
    arr = np.asarray(w, dtype=float)
    return float(np.sum(np.abs(arr))), float(np.sqrt(np.sum(arr * arr)))


def write_trajectory_csv(path, traj, schedule=None, vspec=None):
    """One row per recorded state with the pinned column set.

    reward/cost/net_reward are the undiscounted instant rates (eta * -loss and
    C(g)); the terminal row reuses the last step's control, matching how the
    trajectory's terminal loss is scored.  Without a schedule the control
    columns are zero.
    """
    n = traj.n_steps
    usable = schedule is not None and schedule.kind != "init_weights" and schedule.n_steps == n
    eta = vspec.eta if vspec is not None else 1.0
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TRAJECTORY_COLUMNS)
        for i in range(n + 1):
            ci = min(i, n - 1)
            ctrl = schedule.at(ci) if usable else None
            cost = control_cost(ctrl, vspec.cost) if (usable and vspec is not None and ctrl is not None) else 0.0
            loss = float(traj.losses[i])
            reward = -eta * loss
            state = traj.states[i]
            l1_1, l2_1 = _norms(state[0])
            l1_2, l2_2 = _norms(state[1] if len(state) > 1 else None)
            g_l2 = schedule.control_norm_at(ci) if usable else 0.0
            out.writerow(
                [i, _f(traj.times[i]), _f(loss), _f(reward), _f(cost), _f(reward - cost),
                 _f(l1_1), _f(l2_1), _f(l1_2), _f(l2_2), _f(g_l2)]
            )
    return path


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TRACE_COLUMNS)
        for k in range(len(trace.V)):
            out.writerow([k, _f(trace.V[k]), _f(trace.grad_norm[k]), _f(trace.alpha_used[k]), _f(trace.wall_ms[k])])
    return path


def _config_doc(cfg):
    from .configio import serialize_config

    d, v, o = cfg.dynamics, cfg.value, cfg.optimizer
    return {
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "run_name": cfg.run_name,
        "params": {k: list(val) if isinstance(val, tuple) else val for k, val in cfg.params.items()},
        "dynamics": {
            "kind": d.kind, "input_dim": d.input_dim, "output_dim": d.output_dim,
            "hidden_dim": d.hidden_dim, "tau_w": d.tau_w, "dt": d.dt, "n_steps": d.n_steps,
            "reg_lambda": d.reg_lambda, "init_std": d.init_std, "init_mean": d.init_mean,
            "nonlinearity": d.nonlinearity,
        },
        "value": {
            "gamma": v.gamma, "eta": v.eta, "mode": v.mode,
            "cost_kind": v.cost.kind, "beta": v.cost.beta, "anchor": v.cost.anchor,
            "target_norm": v.cost.target_norm,
        },
        "optimizer": {
            "alpha_g": o.alpha_g, "iters": o.iters, "update_rule": o.update_rule,
            "backtracking": o.backtracking, "max_halvings": o.max_halvings,
        },
        "config_text": serialize_config(cfg),
    }


def write_result_json(path, result, cfg):
    doc = {
        "scenario": result.scenario,
        "V_baseline": result.V_baseline,
        "V_control": result.V_control,
        "stalled_at": result.trace.stalled_at,
        "summaries": result.summaries,
        "config": _config_doc(cfg),
    }
    text = _emit17(doc)
    with open(path, "w") as fh:
        fh.write(text + "\n")
    return path


def write_schedule_json(path, schedule):
    import json

    doc = json.loads(schedule.to_json())
    with open(path, "w") as fh:
        fh.write(_emit17(doc) + "\n")
    return path


def write_run_outputs(result, cfg):
    """Write the full output bundle; returns the directory used.

    Refuses to reuse an existing directory unless cfg.force is set (the CLI
    surfaces that as an I/O error and tells the user about --force).
    """
    out = os.path.join(cfg.out_dir, cfg.run_name) if cfg.run_name else cfg.out_dir
    if os.path.exists(out) and not cfg.force:
        raise FileExistsError(f"output directory '{out}' exists; pass --force to overwrite")
    os.makedirs(out, exist_ok=True)
    write_result_json(os.path.join(out, "result.json"), result, cfg)
    write_schedule_json(os.path.join(out, "schedule.json"), result.schedule)
    write_trace_csv(os.path.join(out, "trace.csv"), result.trace)
    for name, traj in result.trajectories.items():
        fname = name.replace(":", "_") + ".csv"
        sched = result.schedule if name.startswith(("controlled", "sgd_controlled")) else None
        write_trajectory_csv(os.path.join(out, fname), traj, sched, cfg.value)
    return out


# --- charts ------------------------------------------------------------------


@dataclass
class ChartSpec:
    """What to draw: series of (label, csv_path, x_column, y_column)."""

    series: list = field(default_factory=list)
    x_label: str = "x"
    y_label: str = "y"
    log_x: bool = False
    log_y: bool = False
    title: str = ""
    out_path: str = "chart.svg"


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_VIEW_W, _VIEW_H = 800, 500
_X0, _Y0, _PLOT_W, _PLOT_H = 70, 30, 700, 410


def read_csv_columns(path):
    """Numeric columns of a CSV as {name: float array}."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty CSV")
    header = rows[0]
    cols = {h: [] for h in header}
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{r}: expected {len(header)} fields, found {len(row)}")
        for h, cell in zip(header, row):
            try:
                cols[h].append(float(cell))
            except ValueError:
                raise DataFormatError(f"{path}:{r}: non-numeric value '{cell}' in column '{h}'") from None
    return {h: np.array(v) for h, v in cols.items()}


def _axis_range(values, log):
    vals = np.concatenate(values) if values else np.array([])
    if log:
        vals = vals[vals > 0]
    vals = vals[np.isfinite(vals)] if vals.size else vals
    if vals.size == 0:
        return (1.0, 10.0) if log else (0.0, 1.0)
    lo, hi = float(np.min(vals)), float(np.max(vals))
    if lo == hi:
        if log:
            return lo / 2.0, hi * 2.0
        pad = 0.5 if lo == 0.0 else abs(lo) * 0.1
        return lo - pad, hi + pad
    return lo, hi


def _project(v, lo, hi, log):
    if log:
        return (math.log10(v) - math.log10(lo)) / (math.log10(hi) - math.log10(lo))
    return (v - lo) / (hi - lo)


def _ticks(lo, hi, log):
    if not log:
        return [float(t) for t in np.linspace(lo, hi, 5)]
    d0, d1 = math.ceil(math.log10(lo)), math.floor(math.log10(hi))
    if d1 < d0:
        return [lo, hi]
    return [10.0**d for d in range(d0, d1 + 1)]


def render_chart(spec):
    """SVG text for a chart spec; raises ConfigError for missing columns."""
    cache = {}
    series_pts = []
    for label, path, xcol, ycol in spec.series:
        if path not in cache:
            cache[path] = read_csv_columns(path)
        cols = cache[path]
        for want in (xcol, ycol):
            if want not in cols:
                raise ConfigError(f"column '{want}' not in {path} (has: {', '.join(cols)})")
        series_pts.append((label, cols[xcol], cols[ycol]))

    x_lo, x_hi = _axis_range([p[1] for p in series_pts], spec.log_x)
    y_lo, y_hi = _axis_range([p[2] for p in series_pts], spec.log_y)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {_VIEW_W} {_VIEW_H}" '
        f'width="{_VIEW_W}" height="{_VIEW_H}" font-family="sans-serif">',
        f'<rect x="0" y="0" width="{_VIEW_W}" height="{_VIEW_H}" fill="#ffffff"/>',
        f'<rect x="{_X0}" y="{_Y0}" width="{_PLOT_W}" height="{_PLOT_H}" fill="none" stroke="#333333"/>',
    ]
    if spec.title:
        parts.append(f'<text x="{_X0 + _PLOT_W / 2:.1f}" y="20" text-anchor="middle" font-size="15">{spec.title}</text>')

    for t in _ticks(x_lo, x_hi, spec.log_x):
        u = _project(t, x_lo, x_hi, spec.log_x)
        px = _X0 + u * _PLOT_W
        parts.append(f'<line x1="{px:.2f}" y1="{_Y0}" x2="{px:.2f}" y2="{_Y0 + _PLOT_H}" stroke="#dddddd"/>')
        parts.append(
            f'<text x="{px:.2f}" y="{_Y0 + _PLOT_H + 18}" text-anchor="middle" font-size="12">{t:.4g}</text>'
        )
    for t in _ticks(y_lo, y_hi, spec.log_y):
        v = _project(t, y_lo, y_hi, spec.log_y)
        py = _Y0 + _PLOT_H - v * _PLOT_H
        parts.append(f'<line x1="{_X0}" y1="{py:.2f}" x2="{_X0 + _PLOT_W}" y2="{py:.2f}" stroke="#dddddd"/>')
        parts.append(f'<text x="{_X0 - 6}" y="{py + 4:.2f}" text-anchor="end" font-size="12">{t:.4g}</text>')

    parts.append(
        f'<text x="{_X0 + _PLOT_W / 2:.1f}" y="{_VIEW_H - 12}" text-anchor="middle" font-size="13">{spec.x_label}</text>'
    )
    parts.append(
        f'<text x="18" y="{_Y0 + _PLOT_H / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 18 {_Y0 + _PLOT_H / 2:.1f})">{spec.y_label}</text>'
    )

    for k, (label, xs, ys) in enumerate(series_pts):
        color = _PALETTE[k % len(_PALETTE)]
        pts = []
        for x, y in zip(xs, ys):
            if not (np.isfinite(x) and np.isfinite(y)):
                continue
            if (spec.log_x and x <= 0) or (spec.log_y and y <= 0):
                continue
            px = _X0 + _project(x, x_lo, x_hi, spec.log_x) * _PLOT_W
            py = _Y0 + _PLOT_H - _project(y, y_lo, y_hi, spec.log_y) * _PLOT_H
            pts.append(f"{px:.2f},{py:.2f}")
        if pts:
            parts.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = _Y0 + 16 + 18 * k
        parts.append(f'<line x1="{_X0 + _PLOT_W - 150}" y1="{ly - 4}" x2="{_X0 + _PLOT_W - 126}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_X0 + _PLOT_W - 120}" y="{ly}" font-size="12">{label}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot(spec):
    """Render the chart and write it to spec.out_path."""
    text = render_chart(spec)
    with open(spec.out_path, "w") as fh:
        fh.write(text)
    return spec.out_path
