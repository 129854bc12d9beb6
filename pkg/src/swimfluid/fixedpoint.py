"""Coupled fluid/swimmer solve as a fixed point of u -> S(F(T(u))).

T integrates body positions in a given velocity history, F assembles the
internal forcing along a position history and S solves the forced
Navier-Stokes problem.  Picard iteration is done either on whole
trajectories over [0, T*] or step by step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GeometryViolation, ParameterError
from .fluid import (
    ForceField,
    NSETrajectory,
    StaggeredGrid,
    VelocityField,
    difference_estimate_check,
    divergence,
    energy_step_residual,
    h1_norm,
    l2_norm,
    l4_norm,
    nse_step,
    project,
    s_lipschitz_bound,
    solve_nse,
    stability_constant,
)
from .forces import ForceSchedule, body_forces, per_body_l2, spread_forces
from .geometry import ShapeSpec, fubini_section_constant, sobolev_section_constant
from .swimmer import (
    GuardVerdict,
    PositionTrajectory,
    WindowConstants,
    default_q,
    existence_windows,
    force_lipschitz_constant,
    geometry_guard,
    integrate_positions,
    midpoint_step,
    rasterize_bodies,
    t_lipschitz_bound,
)

log = logging.getLogger(__name__)


@dataclass
class CoupledProblem:
    grid: StaggeredGrid
    shape: ShapeSpec
    z0: np.ndarray
    u0: VelocityField
    schedule: ForceSchedule
    T_star: float
    dt: float
    tol: float = 1e-6
    max_iter: int = 50
    ks: float = 2.0
    h0: Optional[float] = None
    q: Optional[float] = None
    c0: float = 1.0
    T: Optional[float] = None

    def __post_init__(self):
        self.z0 = np.atleast_2d(np.asarray(self.z0, dtype=float))
        if self.z0.shape[0] != self.schedule.n_bodies:
            raise ParameterError(f"{self.z0.shape[0]} bodies but the schedule has {self.schedule.n_bodies}")
        if not (self.T_star > 0 and self.dt > 0 and self.tol > 0):
            raise ParameterError("T*, dt and tol must be positive")
        self.n_steps = max(1, int(math.ceil(self.T_star / self.dt - 1e-9)))
        self.dt = self.T_star / self.n_steps
        self.u0 = project(self.u0)[0].with_time(0.0)
        self.times = self.dt * np.arange(self.n_steps + 1)

    @property
    def q_value(self) -> float:
        return default_q(self.grid, l2_norm(self.u0)) if self.q is None else self.q

    def windows(self) -> WindowConstants:
        return existence_windows(
            self.grid, self.shape, self.schedule, self.T or self.T_star, l2_norm(self.u0), h1_norm(self.u0),
            h0=self.h0, ks=self.ks, q=self.q_value, c0=self.c0,
        )


# ----------------------------------------------------------------------------
# the three operators
# ----------------------------------------------------------------------------


def constant_extension(problem: CoupledProblem, u: Optional[VelocityField] = None):
    u = problem.u0 if u is None else u
    return (problem.times, lambda t: u)


def operator_T(problem: CoupledProblem, u_traj) -> PositionTrajectory:
    return integrate_positions(u_traj, problem.z0, problem.shape)


def step_forces(problem: CoupledProblem, z_traj: PositionTrajectory, scale: float = 1.0) -> list:
    """Force field for every time step, sampled at the step midpoint."""
    out = []
    for k in range(problem.n_steps):
        tm = problem.times[k] + 0.5 * problem.dt
        zm = 0.5 * (z_traj.positions[k] + z_traj.positions[k + 1])
        out.append(_assemble(problem, zm, tm, scale))
    return out


def _assemble(problem, zm, tm, scale=1.0):
    inds = rasterize_bodies(zm, problem.shape, problem.grid)
    forces = body_forces(zm, problem.schedule, tm).total * scale
    return spread_forces(forces, problem.grid, inds, problem.shape.measure, tm)


def operator_F(problem: CoupledProblem, z_traj: PositionTrajectory) -> list:
    return step_forces(problem, z_traj)


def _force_provider(problem: CoupledProblem, forces: list):
    def f_of_t(t):
        k = int(min(max(math.floor((t - problem.times[0]) / problem.dt), 0), problem.n_steps - 1))
        return forces[k]

    return f_of_t


def operator_S(problem: CoupledProblem, forces: list, store: bool = True) -> NSETrajectory:
    return solve_nse(problem.u0, _force_provider(problem, forces), problem.T_star, problem.dt, store=store)


def l2v_distance(a: NSETrajectory, b: NSETrajectory) -> float:
    diffs = np.array([h1_norm(x - y) for x, y in zip(a.fields, b.fields)])
    return math.sqrt(float(np.trapezoid(diffs**2, a.times)))


def l2v_norm_of(a) -> float:
    if isinstance(a, NSETrajectory):
        return a.l2v_norm
    times, u_at = a
    vals = np.array([h1_norm(u_at(t)) for t in times])
    return math.sqrt(float(np.trapezoid(vals**2, times)))


# ----------------------------------------------------------------------------
# Picard iteration
# ----------------------------------------------------------------------------


@dataclass
class BqVerdict:
    norm: float
    q: float

    @property
    def inside(self) -> bool:
        return self.norm <= self.q

    @property
    def margin(self) -> float:
        return self.q - self.norm


def bq_monitor(u_traj, q: float) -> BqVerdict:
    """Compare ||u||_{L2(0,T*;H^1_0)} with the ball radius q."""
    return BqVerdict(l2v_norm_of(u_traj), q)


@dataclass
class FixedPointReport:
    iterations: int = 0
    distances: list = field(default_factory=list)
    relative: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    bq_norms: list = field(default_factory=list)
    q: float = 0.0
    converged: bool = False
    residual: float = math.inf
    self_consistency: Optional[float] = None
    windows: Optional[WindowConstants] = None
    terminated: bool = False
    violation: Optional[GuardVerdict] = None
    violation_time: Optional[float] = None
    warnings: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    step_log: list = field(default_factory=list)

    @property
    def in_bq(self) -> list:
        return [n <= self.q for n in self.bq_norms]

    def summary(self) -> dict:
        out = {
            "iterations": self.iterations,
            "converged": self.converged,
            "residual": self.residual,
            "self_consistency": self.self_consistency,
            "q": self.q,
            "max_iterate_norm": max(self.bq_norms) if self.bq_norms else 0.0,
            "all_in_Bq": all(self.in_bq),
            "terminated": self.terminated,
        }
        if self.violation_time is not None:
            out["violation_time"] = self.violation_time
        if self.ratios:
            out["last_ratio"] = self.ratios[-1]
        out.update(self.diagnostics)
        return out


@dataclass
class CoupledSolution:
    u: Optional[NSETrajectory]
    z: PositionTrajectory
    forces: list
    report: FixedPointReport


def _check_window(problem: CoupledProblem, report: FixedPointReport):
    try:
        w = problem.windows()
    except ParameterError as exc:
        report.warnings.append(f"window evaluation failed: {exc}")
        return
    report.windows = w
    if problem.T_star > w.T_star:
        msg = f"requested T*={problem.T_star:.4g} exceeds the guaranteed window {w.T_star:.4g} (binding: {w.T_star_binding}); proceeding"
        report.warnings.append(msg)
        log.warning(msg)


def _diagnostics(problem: CoupledProblem, u: NSETrajectory) -> dict:
    ls = stability_constant(problem.grid)
    c2 = max(l4_norm(f) for f in u.fields) if u.fields else 0.0
    d_star = (ls * (h1_norm(problem.u0) + u.force_norm)) ** 8
    return {"C2": c2, "D_star(artifact constants)": d_star, "force_norm": u.force_norm}


def picard_solve(problem: CoupledProblem, seed=None, mode: str = "interval", **kw) -> CoupledSolution:
    if mode == "interval":
        return _picard_interval(problem, seed)
    if mode == "per_step":
        return picard_per_step(problem, **kw)
    raise ParameterError(f"unknown Picard mode {mode!r}")


def _picard_interval(problem: CoupledProblem, seed=None) -> CoupledSolution:
    report = FixedPointReport(q=problem.q_value)
    _check_window(problem, report)
    if seed is None:
        u_prev = constant_extension(problem)
    elif isinstance(seed, VelocityField):
        u_prev = constant_extension(problem, project(seed)[0])
    else:
        u_prev = seed
    report.bq_norms.append(l2v_norm_of(u_prev))
    u_new = None
    z = None
    forces = []
    for k in range(problem.max_iter):
        z = operator_T(problem, u_prev)
        if z.terminated:
            report.terminated, report.violation, report.violation_time = True, z.violation, z.violation_time
            report.iterations = k
            return CoupledSolution(u_prev if isinstance(u_prev, NSETrajectory) else None, z, forces, report)
        forces = operator_F(problem, z)
        u_new = operator_S(problem, forces)
        report.iterations = k + 1
        report.bq_norms.append(u_new.l2v_norm)
        if isinstance(u_prev, NSETrajectory):
            dist = l2v_distance(u_new, u_prev)
        else:
            times, u_at = u_prev
            diffs = np.array([h1_norm(a - u_at(t)) for a, t in zip(u_new.fields, times)])
            dist = math.sqrt(float(np.trapezoid(diffs**2, times)))
        scale = u_new.l2v_norm
        rel = dist / scale if scale > 0 else dist
        if report.distances and report.distances[-1] > 0:
            report.ratios.append(dist / report.distances[-1])
        report.distances.append(dist)
        report.relative.append(rel)
        u_prev = u_new
        if rel <= problem.tol:
            report.converged = True
            break
    report.residual = report.relative[-1] if report.relative else 0.0
    if report.converged:
        # one more application measures the fixed-point residual
        z_chk = operator_T(problem, u_new)
        if not z_chk.terminated:
            u_chk = operator_S(problem, operator_F(problem, z_chk))
            scale = u_new.l2v_norm
            d = l2v_distance(u_chk, u_new)
            report.self_consistency = d / scale if scale > 0 else d
    report.diagnostics = _diagnostics(problem, u_new)
    return CoupledSolution(u_new, z, forces, report)


@dataclass
class StepRecord:
    t: float
    sub_iterations: int
    sub_residual: float
    divergence: float
    force_sum_rel: float
    torque_rel: float
    energy_residual: float
    l2: float
    h1: float
    min_separation: float


def _force_invariants(z, bf, m):
    total = bf.total
    scale = float(np.sum(np.linalg.norm(total, axis=-1))) * m
    fsum = float(np.linalg.norm(bf.net_force(m)))
    lever = float(np.sum(np.linalg.norm(z, axis=-1) * np.linalg.norm(total, axis=-1))) * m
    torque = float(np.linalg.norm(np.atleast_1d(bf.net_torque(z, m))))
    return (fsum / scale if scale > 0 else 0.0), (torque / lever if lever > 0 else 0.0)


def picard_per_step(
    problem: CoupledProblem,
    sub_tol: Optional[float] = None,
    max_sub: int = 20,
    store: bool = False,
    on_step: Optional[Callable] = None,
) -> CoupledSolution:
    """Sub-iterate the coupled midpoint step until (u, z) at t_{n+1} settle.

    Only the final state, norms and per-step invariants are kept unless
    ``store`` is set.
    """
    sub_tol = problem.tol if sub_tol is None else sub_tol
    report = FixedPointReport(q=problem.q_value)
    g = problem.grid
    m = problem.shape.measure
    u = problem.u0
    z = problem.z0.copy()
    positions = [z.copy()]
    fields = [u] if store else []
    forces_out = []
    l2 = [l2_norm(u)]
    h1 = [h1_norm(u)]
    fl2 = []
    eres = []
    div = [float(np.abs(divergence(u)).max())]
    iu = np.triu_indices(z.shape[0], 1)
    p = None
    for k in range(problem.n_steps):
        t0 = problem.times[k]
        tm = t0 + 0.5 * problem.dt
        u_next = u
        res = math.inf
        z_next = z
        for j in range(max_sub):
            u_mid = VelocityField(g, tuple(0.5 * (a + b) for a, b in zip(u.comps, u_next.comps)))
            try:
                z_next = midpoint_step(u, u_mid, z, problem.dt, problem.shape)
            except GeometryViolation as exc:
                z_next = None
                verdict = getattr(exc, "verdict", None)
                if verdict is None:
                    verdict = GuardVerdict(False, "boundary", (exc.body,), str(exc))
            if z_next is not None:
                verdict = geometry_guard(z_next, problem.shape, g)
            if not verdict:
                report.terminated, report.violation, report.violation_time = True, verdict, problem.times[k + 1]
                if z_next is not None:
                    positions.append(z_next.copy())
                return _per_step_result(problem, report, positions, fields, forces_out, l2, h1, div, eres, fl2, k)
            zm = 0.5 * (z + z_next)
            bf = body_forces(zm, problem.schedule, tm)
            f = spread_forces(bf.total, g, rasterize_bodies(zm, problem.shape, g), m, tm)
            u_cand, p_cand = nse_step(u, f, problem.dt, with_pressure=True, p=p)
            u_cand = u_cand.with_time(problem.times[k + 1])
            diff = h1_norm(u_cand - u_next)
            scale = h1_norm(u_cand)
            res = diff / scale if scale > 0 else diff
            u_next = u_cand
            if res <= sub_tol:
                break
        fsum_rel, torque_rel = _force_invariants(zm, bf, m)
        rec = StepRecord(
            problem.times[k + 1], j + 1, res, float(np.abs(divergence(u_next)).max()), fsum_rel, torque_rel,
            energy_step_residual(u, u_next, f, problem.dt), l2_norm(u_next), h1_norm(u_next),
            float(np.linalg.norm(z_next[iu[0]] - z_next[iu[1]], axis=-1).min()) if iu[0].size else math.inf,
        )
        # the grid sum of the assembled field, relative to its absolute mass
        abs_total = f.abs_total()
        rec.force_sum_rel = max(rec.force_sum_rel, float(np.linalg.norm(f.total())) / abs_total if abs_total > 0 else 0.0)
        report.step_log.append(rec)
        if on_step is not None:
            on_step(rec, u_next, z_next)
        u, z, p = u_next, z_next, p_cand
        positions.append(z.copy())
        l2.append(rec.l2)
        h1.append(rec.h1)
        div.append(rec.divergence)
        eres.append(rec.energy_residual)
        fl2.append(l2_norm(f.as_velocity()))
        if store:
            fields.append(u)
            forces_out.append(f)
        report.residual = max(report.residual if math.isfinite(report.residual) else 0.0, res)
    report.converged = all(r.sub_residual <= sub_tol for r in report.step_log)
    report.iterations = max((r.sub_iterations for r in report.step_log), default=0)
    sol = _per_step_result(problem, report, positions, fields, forces_out, l2, h1, div, eres, fl2, problem.n_steps)
    sol.final_u = u
    return sol


def _per_step_result(problem, report, positions, fields, forces, l2, h1, div, eres, fl2, k):
    n = len(positions)
    times = problem.times[:n]
    z = PositionTrajectory(times, np.array(positions), report.terminated, report.violation, report.violation_time)
    nl = len(l2)
    traj = NSETrajectory(
        problem.grid, problem.dt, problem.times[:nl], fields, [], forces, np.array(l2), np.array(h1), np.array(div),
        np.array(eres), np.array(fl2),
    )
    report.bq_norms.append(traj.l2v_norm)
    return CoupledSolution(traj, z, forces, report)


# ----------------------------------------------------------------------------
# uniqueness and Lipschitz probes
# ----------------------------------------------------------------------------


@dataclass
class UniquenessReport:
    u_distance: float
    u_relative: float
    z_distance: float
    h_cell: float
    tol: float
    both_converged: bool

    @property
    def agree(self) -> bool:
        return self.both_converged and self.u_relative <= 10 * self.tol and self.z_distance <= self.h_cell


def uniqueness_probe(problem: CoupledProblem, seed_a, seed_b) -> UniquenessReport:
    a = picard_solve(problem, seed=seed_a)
    b = picard_solve(problem, seed=seed_b)
    if a.u is None or b.u is None:
        return UniquenessReport(math.inf, math.inf, math.inf, problem.grid.h_min, problem.tol, False)
    d = l2v_distance(a.u, b.u)
    scale = max(a.u.l2v_norm, b.u.l2v_norm)
    return UniquenessReport(
        d, d / scale if scale > 0 else d, a.z.sup_distance(b.z), problem.grid.h_min, problem.tol,
        a.report.converged and b.report.converged,
    )


@dataclass
class LipschitzReport:
    which: str
    ratios: list
    bounds: list
    slack: float = 1.1
    skipped: int = 0

    @property
    def max_ratio(self) -> float:
        return max(self.ratios) if self.ratios else 0.0

    @property
    def worst_fraction(self) -> float:
        """max of ratio / bound over probes."""
        return max((r / b for r, b in zip(self.ratios, self.bounds)), default=0.0)

    @property
    def holds(self) -> bool:
        return all(r <= self.slack * b for r, b in zip(self.ratios, self.bounds))


def force_history_distance(problem: CoupledProblem, z1: PositionTrajectory, z2: PositionTrajectory) -> float:
    """L2(0,T*) distance of the per-body force densities (disjoint-support L2 in space)."""
    m = problem.shape.measure
    total = 0.0
    for k in range(problem.n_steps):
        tm = problem.times[k] + 0.5 * problem.dt
        a = 0.5 * (z1.positions[k] + z1.positions[k + 1])
        b = 0.5 * (z2.positions[k] + z2.positions[k + 1])
        fa = body_forces(a, problem.schedule, tm).total
        fb = body_forces(b, problem.schedule, tm).total
        total += per_body_l2(fa - fb, m) ** 2 * problem.dt
    return math.sqrt(total)


def estimate_operator_lipschitz(which: str, problem: CoupledProblem, probes: Sequence, q: Optional[float] = None) -> LipschitzReport:
    """Empirical Lipschitz ratios of T, F or S against the analytic bounds.

    probes: pairs of velocity trajectories (T), pairs of position
    trajectories (F) or pairs of per-step force lists (S).
    """
    g = problem.grid
    n = problem.z0.shape[0]
    m = problem.shape.measure
    ratios, bounds, skipped = [], [], 0
    c = sobolev_section_constant(g.diam)
    cp = fubini_section_constant(g.diam, g.d)
    for a, b in probes:
        if which == "T":
            den = l2v_distance(a, b)
            if den == 0:
                skipped += 1
                continue
            za, zb = operator_T(problem, a), operator_T(problem, b)
            qq = max(a.l2v_norm, b.l2v_norm) if q is None else q
            ratios.append(za.sup_distance(zb) / den)
            bounds.append(t_lipschitz_bound(g, n, m, c, cp, problem.ks, qq, problem.T_star))
        elif which == "F":
            den = a.sup_distance(b)
            if den == 0:
                skipped += 1
                continue
            ratios.append(force_history_distance(problem, a, b) / den)
            allz = np.concatenate([a.positions, b.positions])
            link_max = float(np.linalg.norm(np.diff(allz, axis=1), axis=-1).max()) + 2 * den
            lf = force_lipschitz_constant(problem.schedule, n, m, problem.shape.bounding_radius, link_max, g.d)
            bounds.append(lf * problem.schedule.gamma(problem.T_star))
        elif which == "S":
            ua, ub = operator_S(problem, a), operator_S(problem, b)
            zero = ForceField.zeros(g)
            df = math.sqrt(sum(l2_norm((fa or zero).as_velocity() - (fb or zero).as_velocity()) ** 2 for fa, fb in zip(a, b)) * problem.dt)
            if df == 0:
                skipped += 1
                continue
            ratios.append(l2v_distance(ua, ub) / df)
            bounds.append(s_lipschitz_bound(g, max(ua.l2v_norm, ub.l2v_norm)))
        else:
            raise ParameterError(f"unknown operator {which!r}")
    return LipschitzReport(which, ratios, bounds, 1.1, skipped)
