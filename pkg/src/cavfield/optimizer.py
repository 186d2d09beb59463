"""Projected gradient descent on the relaxed objective, with continuation in
the interface width and sweep drivers for the limit studies.

The admissible set is a box [0, 1] with the collar nodes pinned at one, so the
Euclidean projection is a clamp followed by the pin.  Armijo backtracking on
the projected step keeps the objective monotone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import adjoint, fem, forward, geometry, metrics
from .adjoint import GAMMA_DEFAULT
from .errors import StagnationError

_BOX_TOL = 1e-12


@dataclass(frozen=True)
class OptimizerOptions:
    """Knobs of one fixed-interface-width descent stage."""

    eps: float
    alpha: float
    gamma: float = GAMMA_DEFAULT
    s0: float = 1.0
    backtrack: float = 0.5
    armijo_c: float = 1e-4
    tol_J: float = 1e-8          # relative decrease threshold over the patience window
    tol_pg: float = 1e-9         # projected-gradient norm threshold
    patience: int = 5
    max_iters: int = 200
    s_min: float = 1e-12
    s_max: float = 1e8
    warm_step: bool = True       # start the line search near the last accepted step

    def __post_init__(self):
        if self.eps <= 0 or self.alpha < 0:
            raise ValueError("need eps > 0 and alpha >= 0")
        if not 0 < self.backtrack < 1 or not 0 < self.armijo_c < 0.5:
            raise ValueError("invalid line-search constants")


@dataclass
class OptHistory:
    """Per-iteration records of one descent run."""

    records: list = field(default_factory=list)
    stagnated: bool = False

    def append(self, **kw):
        self.records.append(kw)

    @property
    def J_values(self):
        return [r["J"] for r in self.records]

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


@dataclass(frozen=True)
class ContinuationSchedule:
    """Decreasing interface widths with fixed conductivity floor and weight."""

    epsilons: tuple
    delta: float
    alpha: float

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        object.__setattr__(self, "epsilons", eps)
        if not eps or any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon list must be nonempty and strictly decreasing")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")

    def validate_against(self, mesh):
        if self.epsilons[-1] < 2.0 * mesh.h:
            raise ValueError(
                f"final eps {self.epsilons[-1]:.4g} under-resolves the mesh "
                f"(needs >= 2h = {2 * mesh.h:.4g})")


def default_schedule(mesh, delta=1e-3, alpha=1e-6):
    return ContinuationSchedule(epsilons=(4.0 * mesh.h, 2.0 * mesh.h),
                                delta=delta, alpha=alpha)


def alpha_from_noise(eta, scale=10.0, floor=1e-6):
    """Regularization weight tied to the noise level: alpha = scale * eta^2.

    The quadratic link keeps eta^2 / alpha bounded as the noise vanishes; at
    eta = 0 a small positive floor stands in.
    """
    if eta < 0:
        raise ValueError("noise level must be nonnegative")
    return float(scale * eta**2) if eta > 0 else float(floor)


def project_admissible(v, labels):
    """Clamp to [0, 1], then pin the collar nodes at one (exact projection)."""
    out = np.clip(np.asarray(v, dtype=float), 0.0, 1.0)
    out[labels.omega1_nodes] = 1.0
    return out


def is_admissible(v, labels, tol=1e-12):
    v = np.asarray(v)
    return bool(v.min() >= -tol and v.max() <= 1 + tol
                and np.all(np.abs(v[labels.omega1_nodes] - 1.0) <= tol))


def projected_gradient(v, g, labels):
    """Gradient with components blocked by active box constraints zeroed."""
    pg = np.asarray(g, dtype=float).copy()
    pg[labels.omega1_nodes] = 0.0
    v = np.asarray(v)
    pg[(v <= _BOX_TOL) & (pg > 0)] = 0.0
    pg[(v >= 1.0 - _BOX_TOL) & (pg < 0)] = 0.0
    return pg


def active_constraint_count(v, labels):
    v = np.asarray(v)
    free = np.ones(v.shape[0], dtype=bool)
    free[labels.omega1_nodes] = False
    return int(np.sum(free & ((v <= _BOX_TOL) | (v >= 1.0 - _BOX_TOL))))


@dataclass
class ObjectiveValue:
    J: float
    misfit: float
    gl: float
    state: forward.StateSolution


def evaluate_objective(setup, opt, v, meas_values, u_init=None):
    """Forward solve plus both objective terms for one phase field."""
    state = forward.solve_state(setup.mesh, setup.labels, setup.coeff, v,
                                setup.delta, setup.f, opts=setup.newton,
                                u0=u_init, blocks=setup.blocks)
    mis = metrics.misfit(setup.labels, setup.sigma_mass,
                         geometry.sigma_trace(setup.labels, state.u), meas_values)
    gl = adjoint.regularizer_energy(setup.mesh, v, opt.eps, gamma=opt.gamma,
                                    k1=setup.k1, mlump=setup.mlump)
    return ObjectiveValue(J=mis + opt.alpha * gl, misfit=mis, gl=gl, state=state)


def _gradient(setup, opt, v, obj, meas_values):
    adj = adjoint.solve_adjoint(setup.mesh, setup.labels, setup.coeff, v,
                                setup.delta, obj.state, meas_values,
                                sigma_mass=setup.sigma_mass, opts=setup.newton,
                                blocks=setup.blocks)
    return adjoint.reduced_gradient(setup.mesh, setup.labels, setup.coeff, v,
                                    setup.delta, opt.eps, opt.alpha, obj.state,
                                    adj, gamma=opt.gamma, k1=setup.k1,
                                    mlump=setup.mlump)


def minimize_fixed_epsilon(setup, opt, v0, meas_values):
    """Projected gradient descent at one interface width.

    Steps are taken against the lumped-mass scaled gradient (the pointwise
    functional derivative), which keeps the useful step scale independent of
    the mesh; the accepted step seeds the next line search.  Stops on a small
    projected gradient, on a stalled objective over the patience window, or at
    the iteration cap.  A failed line search flags the history as stagnated
    and returns the best iterate found.
    """
    v = project_admissible(v0, setup.labels)
    obj = evaluate_objective(setup, opt, v, meas_values)
    history = OptHistory()
    history.append(iter=0, J=obj.J, misfit=obj.misfit, gl=obj.gl, step=0.0,
                   pgnorm=float("nan"), active=active_constraint_count(v, setup.labels))
    inv_m = 1.0 / setup.mlump
    s_prev = opt.s0
    for it in range(1, opt.max_iters + 1):
        g = _gradient(setup, opt, v, obj, meas_values)
        pg = projected_gradient(v, g, setup.labels)
        pgnorm2 = float(pg @ (pg * inv_m))     # squared norm in the descent metric
        pgnorm = np.sqrt(pgnorm2)
        if pgnorm <= opt.tol_pg:
            break
        direction = g * inv_m
        s = min(opt.s_max, 4.0 * s_prev) if opt.warm_step else opt.s0
        accepted = False
        while s >= opt.s_min:
            trial = project_admissible(v - s * direction, setup.labels)
            obj_t = evaluate_objective(setup, opt, trial, meas_values,
                                       u_init=obj.state.u)
            if obj_t.J <= obj.J - opt.armijo_c * s * pgnorm2 \
                    + 1e-12 * max(1.0, abs(obj.J)):
                accepted = True
                break
            s *= opt.backtrack
        if not accepted:
            history.stagnated = True
            break
        v, obj, s_prev = trial, obj_t, s
        history.append(iter=it, J=obj.J, misfit=obj.misfit, gl=obj.gl, step=s,
                       pgnorm=pgnorm, active=active_constraint_count(v, setup.labels))
        J_vals = history.J_values
        if len(J_vals) > opt.patience:
            ref = J_vals[-opt.patience - 1]
            if ref - J_vals[-1] <= opt.tol_J * max(1.0, abs(ref)):
                break
    return v, history


@dataclass
class StageReport:
    eps: float
    J: float
    misfit: float
    gl: float
    interface_width: float
    iterations: int
    history: OptHistory


def run_continuation(setup, schedule, meas_values, opt_base=None):
    """Solve the descent stages over the decreasing interface widths.

    Each stage warm-starts from the previous minimizer; per-stage interface
    width and regularizer energy are recorded for the limit diagnostics.
    """
    schedule.validate_against(setup.mesh)
    if setup.delta != schedule.delta:
        raise ValueError("schedule delta disagrees with the assembled problem")
    base = opt_base or OptimizerOptions(eps=schedule.epsilons[0], alpha=schedule.alpha)
    v = project_admissible(np.ones(setup.mesh.num_nodes), setup.labels)
    stages = []
    for eps in schedule.epsilons:
        opt = replace(base, eps=eps, alpha=schedule.alpha)
        v, history = minimize_fixed_epsilon(setup, opt, v, meas_values)
        last = history.records[-1]
        stages.append(StageReport(
            eps=eps, J=last["J"], misfit=last["misfit"], gl=last["gl"],
            interface_width=metrics.interface_width(setup.mesh, v),
            iterations=len(history.records) - 1, history=history))
    return v, stages


def recovered_set(setup, v, threshold=0.5):
    """Cells whose mean phase value falls below the threshold."""
    return metrics.SetOnMesh.from_indicator(setup.mesh, v, threshold)


def delta_sweep(setup, deltas, v):
    """Trace error of the fictitious-material solve against the true-hole solve
    for a fixed indicator field, over decreasing conductivity floors."""
    deltas = [float(d) for d in deltas]
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("delta list must be strictly decreasing")
    mesh, labels = setup.mesh, setup.labels
    ref = forward.solve_reference_from_indicator(mesh, labels, setup.coeff,
                                                 setup.f, v, opts=setup.newton)
    trace_ref = geometry.sigma_trace(labels, ref.u)
    rows = []
    u_init = None
    for d in deltas:
        sol = forward.solve_state(mesh, labels, setup.coeff, v, d, setup.f,
                                  opts=setup.newton, u0=u_init, blocks=setup.blocks)
        u_init = sol.u
        diff = np.zeros(mesh.num_nodes)
        diff[labels.sigma_nodes] = geometry.sigma_trace(labels, sol.u) - trace_ref
        rows.append({"delta": d,
                     "trace_error": fem.sigma_l2_norm(setup.sigma_mass, diff)})
    errors = [r["trace_error"] for r in rows]
    return {"rows": rows,
            "decreasing": all(b < a for a, b in zip(errors, errors[1:]))}
