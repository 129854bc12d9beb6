"""Command-line entry point: ``swimfluid <subcommand> --config PATH``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import SimulationConfig, load_config, with_seed
from .errors import CFLError, ConfigError, GeometryViolation, SwimfluidError
from .fixedpoint import CoupledProblem, bq_monitor, picard_solve
from .fluid import (
    VelocityField,
    advect,
    h1_norm,
    inner,
    l2_norm,
    project,
    write_snapshot_bin,
    write_snapshot_csv,
)
from .forces import body_forces, verify_force_bounds
from .geometry import estimate_KS, random_bandlimited_field, verify_section_inequalities
from .swimmer import PositionTrajectory, geometry_guard, integrate_positions

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_GUARD = 0, 1, 2, 3

log = logging.getLogger("swimfluid")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _print_kv(pairs, stream=None):
    stream = stream or sys.stdout
    width = max((len(k) for k, _ in pairs), default=0)
    for k, v in pairs:
        print(f"{k.ljust(width)} : {_fmt(v)}", file=stream)


def build_problem(cfg: SimulationConfig) -> CoupledProblem:
    u0 = cfg.initial_velocity()
    probe = CoupledProblem(cfg.grid, cfg.shape, cfg.positions, u0, cfg.schedule, T_star=cfg.T_star or cfg.T, dt=cfg.dt or cfg.T,
                           tol=cfg.tol, max_iter=cfg.max_iter, ks=cfg.ks, h0=cfg.h0, c0=cfg.c0, T=cfg.T)
    t_star = cfg.T_star
    if t_star is None:
        t_star = min(cfg.T, cfg.safety * probe.windows().T_star)
    dt = cfg.dt
    if dt is None:
        umax = max(probe.u0.max_abs(), 0.1)
        dt = min(t_star / 10, 0.5 * cfg.cfl * cfg.grid.h_min / umax)
    return CoupledProblem(cfg.grid, cfg.shape, cfg.positions, u0, cfg.schedule, T_star=t_star, dt=dt, tol=cfg.tol,
                          max_iter=cfg.max_iter, ks=cfg.ks, h0=cfg.h0, c0=cfg.c0, T=cfg.T)


def _trajectory_rows(z: PositionTrajectory, cfg: SimulationConfig):
    for k, t in enumerate(z.times):
        last_violation = z.terminated and k == len(z.times) - 1
        yield [t] + list(z.positions[k].ravel()) + [int(last_violation)]


def _trajectory_header(n, d):
    axes = "xyz"[:d]
    return ["t"] + [f"z{i + 1}{a}" for i in range(n) for a in axes] + ["violation"]


def _report_lines(report) -> list:
    pairs = list(report.summary().items())
    if report.windows is not None:
        for k in ("T0", "Tq", "T_traj", "T_kv", "T_star", "T1"):
            pairs.append((f"window.{k}", getattr(report.windows, k)))
        pairs.append(("window.T_star_binding", report.windows.T_star_binding))
    for wmsg in report.warnings:
        pairs.append(("warning", wmsg))
    return pairs


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_simulate(cfg, out: Path, diagnostics_only=False) -> int:
    problem = build_problem(cfg)
    if cfg.mode == "per_step":
        sol = picard_solve(problem, mode="per_step", store=cfg.snapshot_every > 0)
    else:
        sol = picard_solve(problem)
    rep = sol.report
    pairs = [("mode", cfg.mode), ("T_star", problem.T_star), ("dt", problem.dt)] + _report_lines(rep)
    with open(out / "report.txt", "w") as fh:
        _print_kv(pairs, fh)
    _print_kv(pairs)
    _write_csv(out / "picard_iterates.csv", ["iteration", "distance", "relative", "iterate_norm"],
               [[k + 1, d, r, rep.bq_norms[k + 1] if k + 1 < len(rep.bq_norms) else ""] for k, (d, r) in enumerate(zip(rep.distances, rep.relative))])
    if not diagnostics_only:
        n, d = problem.z0.shape
        _write_csv(out / "trajectory.csv", _trajectory_header(n, d), _trajectory_rows(sol.z, cfg))
        if sol.u is not None:
            u = sol.u
            _write_csv(out / "norms.csv", ["t", "l2", "h1", "divergence"],
                       [[t, a, b, c] for t, a, b, c in zip(u.times, u.l2, u.h1, u.divergence)])
            if cfg.snapshot_every > 0 and u.fields:
                for k in range(0, len(u.fields), cfg.snapshot_every):
                    f = u.fields[k]
                    if cfg.fmt == "bin":
                        write_snapshot_bin(out / f"u_{k:06d}.bin", f)
                    else:
                        write_snapshot_csv(out / f"u_{k:06d}.csv", f)
    if rep.terminated:
        print(f"guard violation at t={rep.violation_time}: {rep.violation.detail}", file=sys.stderr)
        return EXIT_GUARD
    return EXIT_OK if rep.converged else EXIT_INVARIANT


def cmd_window(cfg, out: Path) -> int:
    problem = build_problem(cfg)
    w = problem.windows()
    pairs = list(w.as_dict().items())
    _print_kv(pairs)
    for n in w.notes:
        print(f"note: {n}")
    _write_csv(out / "windows.csv", ["key", "value"], pairs)
    return EXIT_OK


def cmd_check_h2(cfg, out: Path) -> int:
    shape = cfg.shape
    rng = np.random.default_rng(cfg.seed)
    h0 = cfg.h0 or shape.default_h0
    count = cfg.h2["h_samples"]
    mags = h0 * np.linspace(0.05, 0.9, count)
    dirs = rng.standard_normal((count, shape.d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    hs = mags[:, None] * dirs
    claimed = float(cfg.h2["claimed_ks"]) if cfg.h2.get("claimed_ks") else None
    rep = estimate_KS(shape, cfg.h2["eta"], hs, cfg.h2["y_resolution"], h0=h0, claimed_ks=claimed)
    d = shape.d
    header = [f"h_{a}" for a in "xyz"[:d]] + [f"y_{a}" for a in "xyz"[:d]] + ["measure", "ratio"]
    _write_csv(out / "h2.csv", header, rep.rows())
    verdict = "PASS" if rep.all_pass else "FAIL"
    _print_kv([("eta_rule", rep.eta_rule), ("h0", rep.h0), ("samples", rep.n_samples), ("K_S estimate", rep.ks_estimate),
               ("witness h", rep.witness.h.tolist()), ("witness y", rep.witness.y.tolist()),
               ("claimed K_S", claimed if claimed is not None else "none"), ("verdict", verdict)])
    return EXIT_OK if rep.all_pass else EXIT_INVARIANT


def _read_trajectory(path, n, d):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1 : 1 + n * d].reshape(-1, n, d)


def cmd_check_forces(cfg, out: Path, trajectory=None) -> int:
    problem = build_problem(cfg)
    n, d = problem.z0.shape
    if trajectory:
        times, zs = _read_trajectory(trajectory, n, d)
    else:
        z = integrate_positions((problem.times, lambda t: problem.u0), problem.z0, problem.shape)
        times, zs = z.times, z.positions
    m = problem.shape.measure
    rows = []
    ok = True
    for k in range(len(times) - 1):
        tm = 0.5 * (times[k] + times[k + 1])
        zm = 0.5 * (zs[k] + zs[k + 1])
        bf = body_forces(zm, cfg.schedule, tm)
        scale = float(np.sum(np.linalg.norm(bf.total, axis=-1))) * m
        fs = float(np.linalg.norm(bf.net_force(m))) / scale if scale > 0 else 0.0
        lever = float(np.sum(np.linalg.norm(zm, axis=-1) * np.linalg.norm(bf.total, axis=-1))) * m
        tq = float(np.linalg.norm(np.atleast_1d(bf.net_torque(zm, m)))) / lever if lever > 0 else 0.0
        ok &= fs <= 1e-12 and tq <= 1e-12
        rows.append([tm, fs, tq])
    rep = verify_force_bounds(times, zs, cfg.schedule, times[-1] - times[0], cfg.grid.measure, cfg.shape.bounding_radius, m)
    slack = rep.slack if rep.applicable else {"el": "inapplicable", "rot": "inapplicable"}
    _write_csv(out / "forces_check.csv", ["t", "force_sum_rel", "torque_rel", "slack_el", "slack_rot"],
               [r + [slack["el"], slack["rot"]] for r in rows])
    _print_kv([("steps", len(rows)), ("max force_sum_rel", max((r[1] for r in rows), default=0.0)),
               ("max torque_rel", max((r[2] for r in rows), default=0.0)), ("bounds applicable", rep.applicable),
               ("slack el", slack["el"]), ("slack rot", slack["rot"]), ("verdict", "PASS" if ok and rep.holds else "FAIL")])
    return EXIT_OK if ok and (rep.holds or not rep.applicable) else EXIT_INVARIANT


def cmd_check_sections(cfg, out: Path) -> int:
    rng = np.random.default_rng(cfg.seed)
    g = cfg.grid
    shape = tuple(min(n, 64) for n in g.shape)
    rows = []
    ok = True
    for k in range(cfg.n_fields):
        w = random_bandlimited_field(rng, g.lo, g.hi, shape)
        dirs = rng.standard_normal((cfg.n_directions, g.d))
        rep = verify_section_inequalities(w, dirs)
        ok &= rep.holds
        for p in rep.per_direction:
            rows.append([k] + list(p["nu"]) + [p["ratio_i"], p["ratio_ii"]])
    _write_csv(out / "sections.csv", ["field"] + [f"nu_{a}" for a in "xyz"[: g.d]] + ["ratio_i", "ratio_ii"], rows)
    _print_kv([("fields", cfg.n_fields), ("directions", cfg.n_directions), ("worst ratio (i)", max(r[-2] for r in rows)),
               ("worst ratio (ii)", max(r[-1] for r in rows)), ("verdict", "PASS" if ok else "FAIL")])
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_verify(cfg, out: Path) -> int:
    problem = build_problem(cfg)
    results = []

    def record(name, residual, passed):
        results.append((name, residual, bool(passed)))

    sol = picard_solve(problem)
    rep = sol.report
    if rep.terminated:
        print(f"guard violation at t={rep.violation_time}", file=sys.stderr)
        return EXIT_GUARD
    u = sol.u
    record("picard converged (relative residual)", rep.residual, rep.converged)
    record("fixed-point self-consistency", rep.self_consistency, rep.self_consistency is not None and rep.self_consistency <= 2 * problem.tol)
    record("iterates inside B_q (max norm / q)", max(rep.bq_norms) / rep.q, all(rep.in_bq))
    record("max discrete divergence", float(u.divergence.max()), u.divergence.max() <= 1e-9)
    record("max energy-identity residual per step", float(u.energy_residual.max()), True)
    m = problem.shape.measure
    fmax = tmax = 0.0
    for k, f in enumerate(sol.forces):
        tm = problem.times[k] + 0.5 * problem.dt
        zm = 0.5 * (sol.z.positions[k] + sol.z.positions[k + 1])
        bf = body_forces(zm, cfg.schedule, tm)
        tot = f.abs_total()
        if tot > 0:
            fmax = max(fmax, float(np.linalg.norm(f.total())) / tot)
        lever = float(np.sum(np.linalg.norm(zm, axis=-1) * np.linalg.norm(bf.total, axis=-1))) * m
        if lever > 0:
            tmax = max(tmax, float(np.linalg.norm(np.atleast_1d(bf.net_torque(zm, m)))) / lever)
    record("grid sum of forcing (relative)", fmax, fmax <= 1e-12)
    record("net torque (relative)", tmax, tmax <= 1e-12)
    guard_ok = all(geometry_guard(z, problem.shape, problem.grid).ok for z in sol.z.positions)
    record("geometry guard along trajectory", 0.0, guard_ok)
    uf = u.fields[-1]
    skew = abs(inner(advect(uf, uf), uf)) / max(l2_norm(uf) ** 2 * h1_norm(uf), 1e-300)
    record("skew identity b(u,u,u) (scaled)", skew, skew <= 1e-10)
    fb = verify_force_bounds(sol.z.times, sol.z.positions, cfg.schedule, problem.T_star, cfg.grid.measure, cfg.shape.bounding_radius, m)
    record("force norm bounds (applicable and hold)", min(fb.slack.values()) if fb.applicable else math.nan, fb.holds)
    _, pu = project(uf)
    idem = l2_norm(project(uf)[0] - uf)
    record("projection idempotence", idem, idem <= 1e-12 * max(l2_norm(uf), 1.0))
    rows = [[n, r, int(p)] for n, r, p in results]
    _write_csv(out / "verify.csv", ["invariant", "residual", "pass"], rows)
    width = max(len(n) for n, _, _ in results)
    for n, r, p in results:
        print(f"{'PASS' if p else 'FAIL'}  {n.ljust(width)}  {_fmt(r)}")
    return EXIT_OK if all(p for _, _, p in results) else EXIT_INVARIANT


COMMANDS = ("simulate", "check-h2", "check-forces", "check-sections", "window", "picard", "verify")


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swimfluid", description="Coupled fluid/swimmer simulator and verification suite.")
    p.add_argument("subcommand", choices=COMMANDS)
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--seed", type=int, default=None, help="RNG seed for probe suites")
    p.add_argument("--out", default="swimfluid_out", help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--trajectory", default=None, help="trajectory CSV for check-forces")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = with_seed(load_config(args.config, args.override), args.seed)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for w in cfg.warnings:
        log.warning(w)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config_echo.txt", "w") as fh:
        _print_kv(sorted(cfg.echo.items()), fh)
    try:
        if args.subcommand == "simulate":
            return cmd_simulate(cfg, out)
        if args.subcommand == "picard":
            return cmd_simulate(cfg, out, diagnostics_only=True)
        if args.subcommand == "window":
            return cmd_window(cfg, out)
        if args.subcommand == "check-h2":
            return cmd_check_h2(cfg, out)
        if args.subcommand == "check-forces":
            return cmd_check_forces(cfg, out, args.trajectory)
        if args.subcommand == "check-sections":
            return cmd_check_sections(cfg, out)
        return cmd_verify(cfg, out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GeometryViolation as exc:
        print(f"guard violation: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except CFLError as exc:
        print(f"step rejected: {exc} (admissible dt {exc.admissible_dt:.3e})", file=sys.stderr)
        return EXIT_INVARIANT
    except SwimfluidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
