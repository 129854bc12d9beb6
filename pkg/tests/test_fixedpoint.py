import math

import numpy as np
import pytest

from swimfluid.config import initial_velocity
from swimfluid.errors import ParameterError
from swimfluid.fixedpoint import (
    CoupledProblem,
    bq_monitor,
    constant_extension,
    estimate_operator_lipschitz,
    l2v_distance,
    operator_F,
    operator_S,
    operator_T,
    picard_solve,
    uniqueness_probe,
)
from swimfluid.fluid import ForceField, StaggeredGrid, VelocityField, solve_nse
from swimfluid.forces import ForceSchedule, ScheduleTable
from swimfluid.geometry import ShapeSpec
from swimfluid.swimmer import PositionTrajectory


@pytest.fixture(scope="module")
def grid():
    return StaggeredGrid((0, 0), (1, 1), (64, 64), 0.05)


def three_body(grid, T_star=0.02, dt=0.002, u0="vortex:0.05", **kw):
    sch = ForceSchedule([0.12, 0.12], [2.0, ScheduleTable.parse("0:2, 0.05:1")], [ScheduleTable.square(1.0, 0.1, 1.0)])
    return CoupledProblem(grid, ShapeSpec.disc(0.05), [(0.35, 0.5), (0.5, 0.5), (0.65, 0.5)],
                          initial_velocity(u0, grid), sch, T_star=T_star, dt=dt, **kw)


@pytest.fixture(scope="module")
def solved(grid):
    pb = three_body(grid)
    return pb, picard_solve(pb)


def test_problem_validation(grid):
    sch = ForceSchedule.zero(3)
    with pytest.raises(ParameterError):
        CoupledProblem(grid, ShapeSpec.disc(0.05), [(0.3, 0.5), (0.6, 0.5)], VelocityField.zeros(grid), sch, 0.1, 0.01)
    with pytest.raises(ParameterError):
        CoupledProblem(grid, ShapeSpec.disc(0.05), [(0.3, 0.5), (0.5, 0.5), (0.7, 0.5)], VelocityField.zeros(grid), sch, 0.0, 0.01)


def test_dt_adjusted_to_divide_horizon(grid):
    pb = three_body(grid, T_star=0.01, dt=0.003)
    assert pb.n_steps == 4 and pb.dt == pytest.approx(0.0025)


def test_unforced_rest_is_immediate_fixed_point(grid):
    pb = CoupledProblem(grid, ShapeSpec.disc(0.05), [(0.3, 0.5), (0.5, 0.5), (0.7, 0.5)], VelocityField.zeros(grid),
                        ForceSchedule.zero(3), 0.02, 0.005)
    sol = picard_solve(pb)
    assert sol.report.converged and sol.report.iterations == 1
    assert all(f.max_abs() == 0 for f in sol.u.fields)
    assert np.all(sol.z.positions == pb.z0)


def test_picard_converges_and_is_self_consistent(solved):
    pb, sol = solved
    rep = sol.report
    assert rep.converged and rep.iterations <= 25
    assert rep.residual <= pb.tol
    assert rep.self_consistency <= 2 * pb.tol
    assert all(rep.in_bq)
    s = rep.summary()
    assert s["all_in_Bq"] and s["iterations"] == rep.iterations


def test_contraction_ratios_shrink_for_short_horizon(grid):
    sch = ForceSchedule([0.2], [ScheduleTable.parse("0:8, 0.01:4")], [])
    pb = CoupledProblem(grid, ShapeSpec.disc(0.05), [(0.35, 0.5), (0.6, 0.5)], initial_velocity("vortex:0.05", grid),
                        sch, T_star=0.02, dt=0.002, tol=1e-10)
    rep = picard_solve(pb).report
    assert len(rep.ratios) >= 2
    assert rep.ratios[-1] < 1
    assert rep.distances[-1] < rep.distances[0]


def test_bq_monitor(grid, solved):
    pb, sol = solved
    zero = constant_extension(pb, VelocityField.zeros(grid))
    assert bq_monitor(zero, 1e-9).inside
    n = bq_monitor(sol.u, 1.0).norm
    on_boundary = bq_monitor(sol.u, n)
    assert on_boundary.inside and on_boundary.margin == 0
    doubled = (sol.u.times, lambda t: sol.u.at(t) * 2.0)
    assert not bq_monitor(doubled, n).inside


def test_identical_seeds_bitwise(solved):
    pb, sol = solved
    again = picard_solve(pb)
    assert all(np.array_equal(a, b) for fa, fb in zip(sol.u.fields, again.u.fields) for a, b in zip(fa.comps, fb.comps))
    assert np.array_equal(sol.z.positions, again.z.positions)


def test_uniqueness_unforced(grid):
    pb = CoupledProblem(grid, ShapeSpec.disc(0.05), [(0.3, 0.5), (0.5, 0.5), (0.7, 0.5)], VelocityField.zeros(grid),
                        ForceSchedule.zero(3), 0.02, 0.005)
    rep = uniqueness_probe(pb, VelocityField.zeros(grid), initial_velocity("vortex:0.01", grid))
    assert rep.agree


def test_uniqueness_forced_seeds_differ_by_ten_percent(grid, solved):
    pb, _ = solved
    rep = uniqueness_probe(pb, pb.u0, pb.u0 * 1.1)
    assert rep.agree, rep


def test_per_step_mode_invariants(grid):
    pb = three_body(grid, T_star=0.05, dt=0.005)
    sol = picard_solve(pb, mode="per_step")
    log = sol.report.step_log
    assert sol.report.converged and len(log) == pb.n_steps
    assert max(r.divergence for r in log) <= 1e-9
    assert max(r.force_sum_rel for r in log) <= 1e-12
    assert max(r.torque_rel for r in log) <= 1e-12
    # per-step and whole-interval fixed points are close
    interval = picard_solve(pb)
    assert np.abs(sol.z.final - interval.z.final).max() < 1e-4


def test_guard_failure_terminates_early(grid):
    # a stiff spring with short rest length pulls the pair into contact
    pb = CoupledProblem(grid, ShapeSpec.disc(0.05), [(0.35, 0.5), (0.65, 0.5)], VelocityField.zeros(grid),
                        ForceSchedule([0.01], [200.0], []), T_star=0.5, dt=0.005)
    sol = picard_solve(pb)
    rep = sol.report
    assert rep.terminated and rep.violation.kind == "overlap"
    assert 0 < rep.violation_time < 0.5
    assert sol.z.times[-1] == rep.violation_time
    assert len(sol.z.positions) == len(sol.z.times)


def test_unknown_mode(solved):
    pb, _ = solved
    with pytest.raises(ParameterError):
        picard_solve(pb, mode="anderson")


# -- Lipschitz probes ------------------------------------------------------------------


def random_forces(pb, rng, amp):
    g = pb.grid
    kx, ky = rng.integers(1, 4, 2)
    f = VelocityField.from_function(g, lambda x: amp * np.stack([
        np.sin(np.pi * x[..., 0] * kx) * np.sin(np.pi * x[..., 1]),
        np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1] * ky)], -1))
    return [ForceField(g, f.comps)] * pb.n_steps


def test_T_probe_on_identical_pair_is_skipped(solved):
    pb, sol = solved
    rep = estimate_operator_lipschitz("T", pb, [(sol.u, sol.u)])
    assert rep.skipped == 1 and rep.ratios == []


def test_lipschitz_bounds_hold(grid):
    pb = three_body(grid, T_star=0.02, dt=0.002)
    pb.shape = ShapeSpec.disc(0.05)
    rng = np.random.default_rng(0)
    vel = [(operator_S(pb, random_forces(pb, rng, rng.uniform(0.5, 2))),
            operator_S(pb, random_forces(pb, rng, rng.uniform(0.5, 2)))) for _ in range(4)]
    rt = estimate_operator_lipschitz("T", pb, vel)
    assert rt.holds and len(rt.ratios) == 4
    paths = []
    for a, _ in vel:
        za = operator_T(pb, a)
        paths.append((za, PositionTrajectory(za.times, za.positions + 1e-3 * rng.standard_normal(za.positions.shape))))
    rf = estimate_operator_lipschitz("F", pb, paths)
    assert rf.holds
    rs = estimate_operator_lipschitz("S", pb, [(operator_F(pb, a), operator_F(pb, b)) for a, b in paths[:2]])
    assert rs.holds
    with pytest.raises(ParameterError):
        estimate_operator_lipschitz("X", pb, paths)


def test_operator_S_matches_direct_solve(solved):
    pb, sol = solved
    direct = solve_nse(pb.u0, lambda t: sol.forces[min(int(t / pb.dt), pb.n_steps - 1)], pb.T_star, pb.dt)
    assert l2v_distance(direct, operator_S(pb, sol.forces)) == 0.0
