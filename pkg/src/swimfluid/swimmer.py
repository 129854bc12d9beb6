"""Swimmer kinematics: body-averaged velocities, trajectories, guards, windows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import GeometryViolation, ParameterError
from .fluid import StaggeredGrid, VelocityField, poincare_constant, stability_constant, velocity_interpolator
from .forces import ForceSchedule, zeta_bound
from .geometry import IndicatorField, ShapeSpec, fubini_section_constant, rasterize_indicator, sobolev_section_constant


@dataclass
class SwimmerState:
    positions: np.ndarray
    shape: ShapeSpec
    t: float = 0.0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.shape[1] != self.shape.d:
            raise ParameterError(f"positions are {self.positions.shape[1]}-D but the template is {self.shape.d}-D")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def moved(self, positions, t):
        return SwimmerState(positions, self.shape, t)


@dataclass
class GuardVerdict:
    ok: bool
    kind: Optional[str] = None
    bodies: tuple = ()
    detail: str = ""

    def __bool__(self):
        return self.ok


def geometry_guard(z, shape: ShapeSpec, grid: StaggeredGrid) -> GuardVerdict:
    """Strict containment (distance to the walls > r) and separation (> 2r)."""
    pos = np.asarray(getattr(z, "positions", z), dtype=float)
    r = shape.bounding_radius
    lo, hi = np.array(grid.lo), np.array(grid.hi)
    for i, p in enumerate(pos):
        gap = float(min((p - lo).min(), (hi - p).min()))
        if not gap > r:
            return GuardVerdict(False, "boundary", (i,), f"body {i} is {gap:.6g} from the wall (needs > {r:.6g})")
    for i in range(len(pos)):
        for j in range(i + 1, len(pos)):
            dist = float(np.linalg.norm(pos[i] - pos[j]))
            if not dist > 2 * r:
                return GuardVerdict(False, "overlap", (i, j), f"bodies {i},{j} are {dist:.6g} apart (needs > {2 * r:.6g})")
    return GuardVerdict(True)


def rasterize_bodies(z, shape: ShapeSpec, grid: StaggeredGrid) -> list:
    pos = np.asarray(getattr(z, "positions", z), dtype=float)
    return [rasterize_indicator(shape, p, grid, body=i) for i, p in enumerate(pos)]


def average_velocity(u: VelocityField, indicator: IndicatorField, uc: Optional[np.ndarray] = None) -> np.ndarray:
    """Mean of the cell-centered velocity over the body's cells."""
    if indicator.count == 0:
        raise GeometryViolation("body covers no cells", body=indicator.body)
    uc = u.cell_centered() if uc is None else uc
    return uc[indicator.mask].sum(axis=0) * u.grid.cell_volume / indicator.discrete_measure


def body_velocities(u: VelocityField, z, shape: ShapeSpec) -> np.ndarray:
    uc = u.cell_centered()
    return np.array([average_velocity(u, ind, uc) for ind in rasterize_bodies(z, shape, u.grid)])


@dataclass
class PositionTrajectory:
    times: np.ndarray
    positions: np.ndarray  # (K, N, d)
    terminated: bool = False
    violation: Optional[GuardVerdict] = None
    violation_time: Optional[float] = None

    def at(self, t: float) -> np.ndarray:
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        t0, t1 = self.times[k], self.times[k + 1]
        s = (t - t0) / (t1 - t0)
        return (1 - s) * self.positions[k] + s * self.positions[k + 1]

    @property
    def final(self) -> np.ndarray:
        return self.positions[-1]

    def sup_distance(self, other: "PositionTrajectory") -> float:
        """max over bodies and samples of |z_i(t) - w_i(t)|."""
        n = min(len(self.times), len(other.times))
        return float(np.linalg.norm(self.positions[:n] - other.positions[:n], axis=-1).max())


def _velocity_source(u_traj):
    """(times, u_at) from a trajectory-like object or a (times, callable) pair."""
    if isinstance(u_traj, tuple):
        return np.asarray(u_traj[0], dtype=float), u_traj[1]
    return np.asarray(u_traj.times, dtype=float), u_traj.at


def midpoint_step(u_start: VelocityField, u_mid: VelocityField, z: np.ndarray, dt: float, shape: ShapeSpec) -> np.ndarray:
    grid = u_start.grid
    k1 = body_velocities(u_start, z, shape)
    zh = z + 0.5 * dt * k1
    verdict = geometry_guard(zh, shape, grid)
    if not verdict:
        exc = GeometryViolation(verdict.detail, body=verdict.bodies[0])
        exc.verdict = verdict
        raise exc
    k2 = body_velocities(u_mid, zh, shape)
    return z + dt * k2


def integrate_positions(u_traj, z0, shape: Optional[ShapeSpec] = None, raise_on_violation: bool = False) -> PositionTrajectory:
    """Explicit midpoint integration of dz_i/dt = mean of u over S(z_i).

    ``u_traj`` is an NSE trajectory (anything with ``times`` and ``at``) or a
    (times, callable) pair.  Stops at the first guard failure and returns the
    truncated trajectory, whose last row is the violating state.
    """
    shape = shape if shape is not None else z0.shape
    z = np.asarray(getattr(z0, "positions", z0), dtype=float).copy()
    times, u_at = _velocity_source(u_traj)
    first = u_at(times[0])
    verdict = geometry_guard(z, shape, first.grid)
    if not verdict:
        raise GeometryViolation("initial positions violate the guard: " + verdict.detail, body=verdict.bodies[0], time=times[0])
    out = [z.copy()]
    u_start = first
    for k in range(len(times) - 1):
        dt = times[k + 1] - times[k]
        u_end = u_at(times[k + 1])
        u_mid = VelocityField(u_start.grid, tuple(0.5 * (a + b) for a, b in zip(u_start.comps, u_end.comps)))
        try:
            z = midpoint_step(u_start, u_mid, z, dt, shape)
            verdict = geometry_guard(z, shape, u_start.grid)
        except GeometryViolation as exc:
            verdict = getattr(exc, "verdict", None)
            if verdict is None:
                verdict = GuardVerdict(False, "boundary", (exc.body,), str(exc))
        if not verdict:
            out.append(z.copy())
            tv = times[k + 1]
            if raise_on_violation:
                raise GeometryViolation(verdict.detail, body=verdict.bodies[0], time=tv)
            return PositionTrajectory(times[: k + 2], np.array(out), True, verdict, tv)
        out.append(z.copy())
        u_start = u_end
    return PositionTrajectory(times, np.array(out))


# ----------------------------------------------------------------------------
# contraction map
# ----------------------------------------------------------------------------


def template_quadrature(shape: ShapeSpec, spacing: float):
    """Points inside S(0) on a lattice of the given spacing; weights sum to meas(S(0))."""
    r = shape.bounding_radius
    n = int(math.ceil(r / spacing))
    s = (np.arange(-n, n) + 0.5) * spacing
    pts = np.stack(np.meshgrid(*([s] * shape.d), indexing="ij"), axis=-1).reshape(-1, shape.d)
    pts = pts[shape.contains(pts)]
    if pts.size == 0:
        raise ParameterError("quadrature spacing too coarse for the template")
    w = np.full(len(pts), shape.measure / len(pts))
    return pts, w


class ContractionMap:
    """Path map w -> z_{i,0} + (1/m) int_0^t int_{S(w)} u for one body.

    Paths are arrays (K, d) sampled at the velocity trajectory's times.  The
    body integral uses a fixed template quadrature with multilinear velocity
    interpolation, so the map is continuous in w.
    """

    def __init__(self, u_traj, z0, shape: ShapeSpec, h0: Optional[float] = None, spacing: Optional[float] = None):
        self.times, u_at = _velocity_source(u_traj)
        self.fields = [u_at(t) for t in self.times]
        self.interps = [velocity_interpolator(u) for u in self.fields]
        self.z0 = np.asarray(z0, dtype=float)
        self.shape = shape
        self.h0 = shape.default_h0 if h0 is None else h0
        grid = self.fields[0].grid
        self.pts, self.w = template_quadrature(shape, spacing or grid.h_min / 4)

    def body_mean(self, k: int, center) -> np.ndarray:
        vals = self.interps[k](center + self.pts)
        return self.w @ vals / self.shape.measure

    def __call__(self, w: np.ndarray, check: bool = True) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if check:
            dev = float(np.linalg.norm(w - self.z0, axis=-1).max())
            if dev > self.h0 / 2 * (1 + 1e-12):
                raise ParameterError(f"path leaves the ball of radius h0/2 around z0 (deviation {dev:.3e})")
        g = np.array([self.body_mean(k, w[k]) for k in range(len(self.times))])
        return self.z0 + cumulative_trapezoid(g, self.times, axis=0, initial=0.0)

    def iterate(self, seed: np.ndarray, tol: float = 1e-12, max_iter: int = 40):
        w = np.asarray(seed, dtype=float)
        history = []
        for _ in range(max_iter):
            nxt = self(w)
            step = float(np.linalg.norm(nxt - w, axis=-1).max())
            history.append(step)
            w = nxt
            if step <= tol:
                break
        return w, history


def contraction_map_D(w, u_traj, z0, shape: ShapeSpec, h0: Optional[float] = None) -> np.ndarray:
    return ContractionMap(u_traj, z0, shape, h0)(w)


# ----------------------------------------------------------------------------
# existence windows
# ----------------------------------------------------------------------------


def _positive(**kw):
    for k, v in kw.items():
        if v is None or not v > 0:
            raise ParameterError(f"{k} must be positive, got {v!r}")


def _argmin(terms: dict):
    key = min(terms, key=lambda k: terms[k])
    return terms[key], key


def _ratio_sq(num, den):
    return math.inf if den == 0 else (num / den) ** 2


def window_T0(T, m, h0, ks, c, cp, u_l2l2, u_l2h1):
    """min{T, m h0^2 / (4 ||u||^2_{L2 L2}), (m / (2 c c' K ||u||_{L2 H1}))^2} and its binding term."""
    _positive(T=T, m=m, h0=h0, ks=ks, c=c, cp=cp)
    terms = {
        "T": T,
        "shift": math.inf if u_l2l2 == 0 else m * h0**2 / (4 * u_l2l2**2),
        "section": _ratio_sq(m, 2 * c * cp * ks * u_l2h1),
    }
    return _argmin(terms)


def window_Tq(T, m, h0, ks, c, cp, poincare, q):
    """T0 with the velocity norms replaced by their B_q bounds."""
    _positive(T=T, m=m, h0=h0, ks=ks, c=c, cp=cp, poincare=poincare, q=q)
    terms = {
        "T": T,
        "shift": m * h0**2 / (4 * poincare**2 * q**2),
        "section": _ratio_sq(m, 2 * c * cp * ks * q),
    }
    return _argmin(terms)


def window_traj(tq, m, ks, c, cp, q):
    _positive(tq=tq, m=m, ks=ks, c=c, cp=cp, q=q)
    return _argmin({"Tq": tq, "trajectory": _ratio_sq(m, c * cp * ks * q)})


def window_T_kv(schedule: ForceSchedule, L_S, L_F, q):
    """Largest tau with L_S L_F Gamma(tau) <= q/2."""
    _positive(L_S=L_S, L_F=L_F, q=q)
    return schedule.gamma_inverse(q / (2 * L_S * L_F))


def window_T1(T, c0, u0_h1, zeta, d):
    if d == 2:
        return math.inf
    _positive(T=T, c0=c0)
    s = u0_h1**2 + zeta**2
    return min(T, math.inf if s == 0 else c0 / s**2)


def force_bound_constant(grid: StaggeredGrid, schedule: ForceSchedule, r: float) -> float:
    """L_F with ||F z||_{L2(0,T;L2)} <= L_F Gamma(T) for any admissible z."""
    root = math.sqrt(grid.measure)
    D = grid.diam
    n_el = schedule.rest_lengths.size
    n_rot = len(schedule.v)
    el = 2 * root * n_el * (D + float(schedule.rest_lengths.max()))
    if grid.d == 2:
        rot = 2 * root * n_rot * (D + D * D / (2 * r))
    else:
        rot = 4 * root * n_rot * D**3
    return el + rot


def force_lipschitz_constant(schedule: ForceSchedule, n: int, m: float, r: float, link_max: float, d: int) -> float:
    """L'_F for the per-body force map, with |z_i - z_{i-1}| <= link_max and links > 2r."""
    D = link_max
    c_el = 1.0 + float(schedule.rest_lengths.max()) / r if schedule.variant == "hooke" else 1.0
    c_rot = 1.0 + D / r + D * D / (4 * r * r) if d == 2 else 6 * D * D + 2 * D**3 / r
    return math.sqrt(n * m) * (4 * c_el + 8 * c_rot)


def trajectory_lipschitz_constant(grid: StaggeredGrid, n: int, m: float) -> float:
    """L'_T = C_P sqrt(N) / sqrt(m)."""
    return poincare_constant(grid) * math.sqrt(n) / math.sqrt(m)


def t_lipschitz_bound(grid, n, m, c, cp, ks, q, horizon) -> float:
    den = 1.0 - c * cp * ks * q * math.sqrt(horizon) / m
    if den <= 0:
        return math.inf
    return trajectory_lipschitz_constant(grid, n, m) * math.sqrt(horizon) / den


def default_q(grid: StaggeredGrid, u0_l2: float, floor: float = 1e-3) -> float:
    return max(2.0 * stability_constant(grid) * u0_l2, floor)


@dataclass
class WindowConstants:
    h0: float
    ks: float
    c_omega: float
    c_omega_prime: float
    poincare: float
    measure: float
    q: float
    L_S: float
    L_F: float
    T: float
    gamma: float
    T0: float
    T0_binding: str
    Tq: float
    Tq_binding: str
    T_traj: float
    T_traj_binding: str
    T_kv: float
    T_star: float
    T_star_binding: str
    T1: float
    c0: float
    zeta: float
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "notes"}


def existence_windows(
    grid: StaggeredGrid,
    shape: ShapeSpec,
    schedule: ForceSchedule,
    T: float,
    u0_l2: float,
    u0_h1: float = 0.0,
    u_l2l2: Optional[float] = None,
    u_l2h1: Optional[float] = None,
    h0: Optional[float] = None,
    ks: Optional[float] = None,
    q: Optional[float] = None,
    c0: float = 1.0,
) -> WindowConstants:
    """Evaluate every window formula with the explicit constants.

    ``u_l2l2``/``u_l2h1`` feed T0 (defaults: the B_q bounds C_P q and q).
    """
    h0 = shape.default_h0 if h0 is None else h0
    ks = 2.0 if ks is None else ks
    m = shape.measure
    c = sobolev_section_constant(grid.diam)
    cp = fubini_section_constant(grid.diam, grid.d)
    cpo = poincare_constant(grid)
    L_S = stability_constant(grid)
    q = default_q(grid, u0_l2) if q is None else q
    _positive(T=T, q=q, h0=h0, ks=ks)
    L_F = force_bound_constant(grid, schedule, shape.bounding_radius)
    u_l2h1 = q if u_l2h1 is None else u_l2h1
    u_l2l2 = cpo * u_l2h1 if u_l2l2 is None else u_l2l2
    t0, t0b = window_T0(T, m, h0, ks, c, cp, u_l2l2, u_l2h1)
    tq, tqb = window_Tq(T, m, h0, ks, c, cp, cpo, q)
    tt, ttb = window_traj(tq, m, ks, c, cp, q)
    tkv = window_T_kv(schedule, L_S, L_F, q)
    ts, tsb = _argmin({"one": 1.0, "Tq": tq, "T_kv": tkv, "trajectory": _ratio_sq(m, c * cp * ks * q)})
    zeta = zeta_bound(schedule, T, grid.diam, grid.measure, shape.bounding_radius, grid.d)
    t1 = window_T1(T, c0, u0_h1, zeta, grid.d)
    notes = []
    if grid.d == 3:
        notes.append(f"T1 uses C0={c0} (unspecified constant; configurable)")
        ts = min(ts, t1)
        if ts == t1:
            tsb = "T1"
    return WindowConstants(
        h0, ks, c, cp, cpo, m, q, L_S, L_F, T, schedule.gamma(min(ts, T)) if math.isfinite(ts) else schedule.gamma(T),
        t0, t0b, tq, tqb, tt, ttb, tkv, ts, tsb, t1, c0, zeta, notes,
    )


def displacement_bound(t: float, u_l2h: float, m: float) -> float:
    """sqrt(t) ||u||_{L2(0,t;H)} / sqrt(m)."""
    return math.sqrt(t) * u_l2h / math.sqrt(m)


def equicontinuity_bound(step: float, poincare: float, q: float, m: float) -> float:
    return poincare * q * math.sqrt(step) / math.sqrt(m)
