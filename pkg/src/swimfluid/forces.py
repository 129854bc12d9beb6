"""Internal swimmer forces: elastic links and rotational pairs.

Per-body forces are computed as vectors (force per unit body measure) and
then spread uniformly over each body's rasterized cells.  The spreading is
normalized by the discrete body measure, so the discrete integral of the
field over body i equals F_i * meas(S(0)) exactly and the grid sum cancels
to roundoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BodyCollisionError, DegenerateLinkError, DimensionError, ParameterError
from .fluid import ForceField, StaggeredGrid

DEGENERATE_LINK = 1e-8
ELASTIC_VARIANTS = ("hooke", "colinear")
ROT3D_VARIANTS = ("balanced", "literal")


@dataclass
class ScheduleTable:
    """Piecewise-constant function of time: value[k] on [times[k], times[k+1]).

    The first value also applies before times[0] and the last one after the
    final breakpoint.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if self.times.shape != self.values.shape or self.times.size == 0:
            raise ParameterError("schedule table needs matching nonempty times/values")
        if np.any(np.diff(self.times) <= 0):
            raise ParameterError("schedule breakpoints must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("schedule values must be finite")

    @classmethod
    def constant(cls, value):
        return cls([0.0], [value])

    @classmethod
    def parse(cls, text: str):
        """Parse ``"t0:v0, t1:v1, ..."`` or a bare number (constant)."""
        text = text.strip()
        if ":" not in text:
            return cls.constant(float(text))
        times, values = [], []
        for item in text.split(","):
            t, v = item.split(":")
            times.append(float(t))
            values.append(float(v))
        return cls(times, values)

    @classmethod
    def square(cls, amplitude, period, horizon):
        """Square wave +amp/-amp switching every half period on [0, horizon]."""
        n = max(1, int(math.ceil(2 * horizon / period)))
        times = 0.5 * period * np.arange(n)
        values = amplitude * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        return cls(times, values)

    def __call__(self, t):
        k = np.searchsorted(self.times, t, side="right") - 1
        return self.values[np.clip(k, 0, self.values.size - 1)]

    def breakpoints(self):
        return self.times

    def l2_norm(self, horizon: float, start: float = 0.0) -> float:
        return _l2_of([self], lambda v: v[0], horizon, start)

    def time_to_l2(self, level: float, start: float = 0.0) -> float:
        """Largest tau with ||self||_{L2(start, start+tau)} <= level (inf if never exceeded)."""
        target = level * level
        acc = 0.0
        t = start
        edges = [x for x in self.times if x > start] + [math.inf]
        for e in edges:
            rate = float(self(t)) ** 2
            span = e - t
            if rate > 0 and acc + rate * span > target:
                return t + (target - acc) / rate - start
            acc += rate * span if math.isfinite(span) else 0.0
            t = e
        return math.inf


def _l2_of(tables, combine, horizon, start=0.0) -> float:
    """Exact L2(start, start+horizon) norm of combine(values) over piecewise-constant tables."""
    end = start + horizon
    pts = {start, end}
    for tb in tables:
        pts.update(float(x) for x in tb.times if start < x < end)
    pts = np.array(sorted(pts))
    mids = 0.5 * (pts[1:] + pts[:-1])
    vals = np.array([combine([float(tb(m)) for tb in tables]) for m in mids])
    return math.sqrt(float(np.sum(vals**2 * np.diff(pts))))


@dataclass
class ForceSchedule:
    rest_lengths: np.ndarray
    kappa: list
    v: list
    variant: str = "hooke"
    rot3d: str = "balanced"

    def __post_init__(self):
        self.rest_lengths = np.atleast_1d(np.asarray(self.rest_lengths, dtype=float))
        self.kappa = [k if isinstance(k, ScheduleTable) else ScheduleTable.constant(k) for k in self.kappa]
        self.v = [x if isinstance(x, ScheduleTable) else ScheduleTable.constant(x) for x in self.v]
        n_links = self.rest_lengths.size
        if len(self.kappa) != n_links:
            raise ParameterError(f"{n_links} links need {n_links} elastic tables, got {len(self.kappa)}")
        if len(self.v) != max(n_links - 1, 0):
            raise ParameterError(f"{n_links + 1} bodies need {max(n_links - 1, 0)} rotational tables, got {len(self.v)}")
        if np.any(self.rest_lengths <= 0):
            raise ParameterError("rest lengths must be positive")
        if self.variant not in ELASTIC_VARIANTS:
            raise ParameterError(f"elastic variant must be one of {ELASTIC_VARIANTS}")
        if self.rot3d not in ROT3D_VARIANTS:
            raise ParameterError(f"rot3d variant must be one of {ROT3D_VARIANTS}")
        if self.variant == "hooke" and any(np.any(k.values < 0) for k in self.kappa):
            raise ParameterError("hooke rigidities must be nonnegative")

    @classmethod
    def zero(cls, n_bodies, rest_length=1.0, **kw):
        return cls(np.full(n_bodies - 1, rest_length), [0.0] * (n_bodies - 1), [0.0] * max(n_bodies - 2, 0), **kw)

    @property
    def n_bodies(self) -> int:
        return self.rest_lengths.size + 1

    def tables(self):
        return list(self.kappa) + list(self.v)

    def gamma(self, horizon: float, start: float = 0.0) -> float:
        """Largest L2(0, horizon) norm among all elastic and rotational tables."""
        norms = [tb.l2_norm(horizon, start) for tb in self.tables()]
        return max(norms) if norms else 0.0

    def gamma_inverse(self, level: float, start: float = 0.0) -> float:
        """Largest tau with gamma(tau) <= level."""
        taus = [tb.time_to_l2(level, start) for tb in self.tables()]
        return min(taus) if taus else math.inf

    def kappa_sum_l2(self, horizon: float) -> float:
        return _l2_of(self.kappa, lambda v: sum(abs(x) for x in v), horizon) if self.kappa else 0.0

    def v_sum_l2(self, horizon: float) -> float:
        return _l2_of(self.v, lambda v: sum(abs(x) for x in v), horizon) if self.v else 0.0

    def scaled(self, factor: float) -> "ForceSchedule":
        scale = lambda tb: ScheduleTable(tb.times, factor * tb.values)
        return ForceSchedule(self.rest_lengths, [scale(k) for k in self.kappa], [scale(x) for x in self.v], self.variant, self.rot3d)


@dataclass
class BodyForceSet:
    elastic: np.ndarray
    rotational: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.elastic + self.rotational

    def net_force(self, measure: float = 1.0) -> np.ndarray:
        return self.total.sum(axis=0) * measure

    def net_torque(self, z, measure: float = 1.0, part: str = "total", about=None) -> np.ndarray:
        z = _positions(z)
        f = {"total": self.total, "elastic": self.elastic, "rotational": self.rotational}[part]
        ref = np.zeros(z.shape[1]) if about is None else np.asarray(about, dtype=float)
        return _cross(z - ref, f).sum(axis=0) * measure

    def scale(self) -> float:
        return float(np.abs(self.total).sum())


def _positions(z) -> np.ndarray:
    return np.asarray(getattr(z, "positions", z), dtype=float)


def _cross(a, b):
    """Cross product; scalar z-component in 2-D."""
    if a.shape[-1] == 2:
        return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return np.cross(a, b)


def _link_check(z, j):
    d = z[j + 1] - z[j]
    n = float(np.linalg.norm(d))
    if n < DEGENERATE_LINK:
        raise DegenerateLinkError(f"bodies {j} and {j + 1} coincide (|dz| = {n:.3e})", link=j)
    return d, n


def elastic_forces(z, schedule: ForceSchedule, t: float) -> BodyForceSet:
    z = _positions(z)
    if z.shape[0] != schedule.n_bodies:
        raise DimensionError(f"{z.shape[0]} bodies but schedule is for {schedule.n_bodies}")
    out = np.zeros_like(z)
    for j in range(z.shape[0] - 1):
        d, n = _link_check(z, j)
        k = float(schedule.kappa[j](t))
        if schedule.variant == "hooke":
            pair = k * (n - schedule.rest_lengths[j]) / n * d
        else:
            pair = k * d
        out[j] += pair
        out[j + 1] -= pair
    return BodyForceSet(out, np.zeros_like(z))


def rot_forces_2d(z, schedule: ForceSchedule, t: float) -> BodyForceSet:
    z = _positions(z)
    if z.shape[1] != 2:
        raise DimensionError("rot_forces_2d needs planar positions")
    out = np.zeros_like(z)
    for j in range(1, z.shape[0] - 1):
        vj = float(schedule.v[j - 1](t))
        _link_check(z, j - 1)
        _link_check(z, j)
        if vj == 0.0:
            continue
        a = z[j - 1] - z[j]
        b = z[j + 1] - z[j]
        rho = np.dot(a, a) / np.dot(b, b)
        # A(x, y) = (y, -x)
        fa = vj * np.array([a[1], -a[0]])
        fb = -vj * rho * np.array([b[1], -b[0]])
        out[j - 1] += fa
        out[j + 1] += fb
        out[j] -= fa + fb
    return BodyForceSet(np.zeros_like(z), out)


def rot_operators_3d(z, j):
    """(P, Q) as 3x3 matrices for interior joint j: P x = c x x, Q x = x x c."""
    c = np.cross(z[j - 1] - z[j], z[j + 1] - z[j])
    P = np.array([[0.0, -c[2], c[1]], [c[2], 0.0, -c[0]], [-c[1], c[0], 0.0]])
    return P, -P


def rot_forces_3d(z, schedule: ForceSchedule, t: float) -> BodyForceSet:
    """Cross-product rotational pairs.

    The default ``balanced`` variant applies the same plane rotation c x (.)
    to both outer bodies so the pair is torque-free; ``literal`` applies
    x x c to the far body.
    """
    z = _positions(z)
    if z.shape[1] != 3:
        raise DimensionError("rot_forces_3d needs 3-D positions")
    out = np.zeros_like(z)
    for j in range(1, z.shape[0] - 1):
        vj = float(schedule.v[j - 1](t))
        _link_check(z, j - 1)
        _link_check(z, j)
        if vj == 0.0:
            continue
        a = z[j - 1] - z[j]
        b = z[j + 1] - z[j]
        rho = np.dot(a, a) / np.dot(b, b)
        P, Q = rot_operators_3d(z, j)
        fa = vj * (P @ a)
        fb = -vj * rho * ((P if schedule.rot3d == "balanced" else Q) @ b)
        out[j - 1] += fa
        out[j + 1] += fb
        out[j] -= fa + fb
    return BodyForceSet(np.zeros_like(z), out)


def body_forces(z, schedule: ForceSchedule, t: float) -> BodyForceSet:
    z = _positions(z)
    el = elastic_forces(z, schedule, t)
    rot = rot_forces_2d(z, schedule, t) if z.shape[1] == 2 else rot_forces_3d(z, schedule, t)
    return BodyForceSet(el.elastic, rot.rotational)


def spread_forces(forces: np.ndarray, grid: StaggeredGrid, indicators, template_measure: float, t: float = 0.0) -> ForceField:
    """Spread per-body force densities uniformly over rasterized bodies."""
    occupancy = np.zeros(grid.shape, dtype=np.int32)
    density = np.zeros(grid.shape + (grid.d,))
    for i, ind in enumerate(indicators):
        occupancy += ind.mask
        density[ind.mask] += forces[i] * (template_measure / ind.discrete_measure)
    if occupancy.max() > 1:
        raise BodyCollisionError("rasterized bodies overlap")
    return ForceField.from_cell_density(grid, density, t)


def assemble_force_field(z, schedule: ForceSchedule, t: float, grid: StaggeredGrid, indicators, template_measure: float) -> ForceField:
    forces = body_forces(z, schedule, t).total
    return spread_forces(forces, grid, indicators, template_measure, t)


def body_integral(f: ForceField, indicator) -> np.ndarray:
    """Discrete integral of f over the faces touching one body's cells.

    With the half/half face split this returns exactly the spread total.
    """
    d = f.grid.d
    out = np.zeros(d)
    m = indicator.mask
    for a, c in enumerate(f.comps):
        pad = [(0, 0)] * d
        pad[a] = (1, 0)
        lo = np.pad(m, pad)
        pad[a] = (0, 1)
        hi = np.pad(m, pad)
        out[a] = c[lo | hi].sum() * f.grid.cell_volume
    return out


def per_body_l2(forces: np.ndarray, template_measure: float) -> float:
    """L2(Omega) norm of sum_i F_i 1_{S(z_i)} for disjoint bodies."""
    return math.sqrt(float(np.sum(forces**2)) * template_measure)


# ----------------------------------------------------------------------------
# norm bounds
# ----------------------------------------------------------------------------


@dataclass
class ForceBoundReport:
    applicable: bool
    lhs: dict = field(default_factory=dict)
    rhs: dict = field(default_factory=dict)
    zeta: float = 0.0
    min_separation: float = math.inf

    @property
    def slack(self) -> dict:
        return {k: self.rhs[k] - self.lhs[k] for k in self.lhs}

    @property
    def holds(self) -> bool:
        return self.applicable and all(self.lhs[k] <= self.rhs[k] * (1 + 1e-12) + 1e-300 for k in self.lhs)


def force_norm_bounds(schedule: ForceSchedule, horizon: float, link_sup: np.ndarray, domain_measure: float, r: float, d: int) -> dict:
    """Right-hand sides of the elastic and rotational L2(0,T;L2) bounds.

    ``link_sup[j]`` is the sup over time of |z_{j+1} - z_j|.
    """
    root = math.sqrt(domain_measure)
    link_sup = np.asarray(link_sup, dtype=float)
    out = {"el": 2 * root * schedule.kappa_sum_l2(horizon) * float(np.max(link_sup + schedule.rest_lengths))}
    if d == 2:
        rot_links = link_sup if link_sup.size else np.zeros(1)
        out["rot"] = 2 * root * schedule.v_sum_l2(horizon) * float(np.max(rot_links + rot_links**2 / (2 * r)))
    else:
        out["rot"] = 4 * root * schedule.v_sum_l2(horizon) * float(np.max(link_sup**3))
    return out


def zeta_bound(schedule: ForceSchedule, horizon: float, diam: float, domain_measure: float, r: float, d: int) -> float:
    """A priori bound on ||f||_{L2(0,T;L2)} using |z_i - z_{i-1}| <= diam."""
    links = np.full(schedule.rest_lengths.size, diam)
    b = force_norm_bounds(schedule, horizon, links, domain_measure, r, d)
    return b["el"] + b["rot"]


def verify_force_bounds(times, z_traj, schedule: ForceSchedule, horizon: float, domain_measure: float, r: float, template_measure: float) -> ForceBoundReport:
    """Compare measured force norms on a trajectory with the a priori bounds.

    ``z_traj`` has shape (K, N, d) at ``times`` (K,).  Forces are evaluated
    at interval midpoints with positions interpolated linearly; the L2 norm in
    space is the per-body (disjoint-support) norm.
    """
    times = np.asarray(times, dtype=float)
    z_traj = np.asarray(z_traj, dtype=float)
    d = z_traj.shape[2]
    n = z_traj.shape[1]
    iu = np.triu_indices(n, 1)
    seps = np.linalg.norm(z_traj[:, :, None, :] - z_traj[:, None, :, :], axis=-1)[:, iu[0], iu[1]]
    min_sep = float(seps.min()) if seps.size else math.inf
    rep = ForceBoundReport(applicable=min_sep > 2 * r, min_separation=min_sep)
    if not rep.applicable:
        return rep
    mask = times <= times[0] + horizon * (1 + 1e-12)
    times, z_traj = times[mask], z_traj[mask]
    el2 = rot2 = 0.0
    for k in range(times.size - 1):
        dt = times[k + 1] - times[k]
        tm = times[k] + 0.5 * dt
        zm = 0.5 * (z_traj[k] + z_traj[k + 1])
        bf = body_forces(zm, schedule, tm)
        el2 += per_body_l2(bf.elastic, template_measure) ** 2 * dt
        rot2 += per_body_l2(bf.rotational, template_measure) ** 2 * dt
    # sup of link lengths over the trajectory and the midpoints used above
    mids = 0.5 * (z_traj[1:] + z_traj[:-1])
    allz = np.concatenate([z_traj, mids]) if mids.size else z_traj
    link_sup = np.linalg.norm(np.diff(allz, axis=1), axis=-1).max(axis=0)
    rep.lhs = {"el": math.sqrt(el2), "rot": math.sqrt(rot2)}
    rep.rhs = force_norm_bounds(schedule, times[-1] - times[0], link_sup, domain_measure, r, d)
    rep.zeta = rep.rhs["el"] + rep.rhs["rot"]
    return rep
