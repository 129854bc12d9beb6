"""Incompressible Navier-Stokes on a MAC (staggered) grid in a box.

Velocity components live on cell faces, pressure at cell centers.  The
domain is an axis-aligned box with homogeneous Dirichlet data on every
wall.  A step is Crank-Nicolson diffusion + explicit skew-symmetric
advection + explicit forcing, followed by a Chorin projection.

Every linear system here (Helmholtz per velocity component, Neumann
Poisson for the pressure) is diagonalized exactly by sine/cosine
transforms on the box, so the solves are direct; their residuals are still
checked against the configured tolerance.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import scipy.fft as sfft
from scipy.interpolate import RegularGridInterpolator

from .errors import CFLError, DimensionError, DivergenceError, NeedsInteriorTimeError, SolverError

POISSON_TOL = 1e-10
SNAPSHOT_MAGIC = "SWIMFLD1"
HEADER_BYTES = 64


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("SWIMFLUID_THREADS", "1")))
    except ValueError:
        return 1


def _sl(d, axis, s):
    idx = [slice(None)] * d
    idx[axis] = s
    return tuple(idx)


def _shape_along(shape, axis, size):
    out = [1] * len(shape)
    out[axis] = size
    return tuple(out)


# ----------------------------------------------------------------------------
# grid and field types
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class StaggeredGrid:
    lo: tuple
    hi: tuple
    shape: tuple
    nu: float

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        shape = tuple(int(n) for n in self.shape)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "nu", float(self.nu))
        if not (len(lo) == len(hi) == len(shape)) or len(shape) not in (2, 3):
            raise DimensionError("grid must be 2-D or 3-D with matching lo/hi/shape")
        if any(n < 16 for n in shape):
            raise DimensionError(f"resolution must be >= 16 per axis, got {shape}")
        if any(b <= a for a, b in zip(lo, hi)):
            raise DimensionError("domain box must have positive extent")
        if not self.nu > 0:
            raise DimensionError("viscosity must be positive")

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def h(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / np.array(self.shape)

    @property
    def h_min(self) -> float:
        return float(self.h.min())

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.hi) - np.array(self.lo)

    @property
    def diam(self) -> float:
        return float(np.linalg.norm(self.extent))

    @property
    def measure(self) -> float:
        return float(np.prod(self.extent))

    def face_shape(self, a: int) -> tuple:
        s = list(self.shape)
        s[a] += 1
        return tuple(s)

    def cell_axes(self) -> list:
        return [self.lo[b] + (np.arange(n) + 0.5) * self.h[b] for b, n in enumerate(self.shape)]

    def face_axes(self, a: int) -> list:
        axes = self.cell_axes()
        axes[a] = self.lo[a] + np.arange(self.shape[a] + 1) * self.h[a]
        return axes

    def cell_centers(self) -> np.ndarray:
        """Array of shape (*shape, d) with cell-center coordinates."""
        mesh = np.meshgrid(*self.cell_axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    def face_centers(self, a: int) -> np.ndarray:
        mesh = np.meshgrid(*self.face_axes(a), indexing="ij")
        return np.stack(mesh, axis=-1)

    def refined(self, factor: int = 2) -> "StaggeredGrid":
        return StaggeredGrid(self.lo, self.hi, tuple(n * factor for n in self.shape), self.nu)

    def contains(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p - margin > np.array(self.lo)) and np.all(p + margin < np.array(self.hi)))


def _check_same_grid(*fields):
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise DimensionError("fields live on different grids")
    return g


@dataclass
class VelocityField:
    grid: StaggeredGrid
    comps: tuple
    t: float = 0.0

    def __post_init__(self):
        comps = tuple(np.asarray(c, dtype=float) for c in self.comps)
        if len(comps) != self.grid.d:
            raise DimensionError(f"expected {self.grid.d} components, got {len(comps)}")
        for a, c in enumerate(comps):
            if c.shape != self.grid.face_shape(a):
                raise DimensionError(f"component {a} has shape {c.shape}, expected {self.grid.face_shape(a)}")
        self.comps = comps

    @classmethod
    def zeros(cls, grid, t=0.0):
        return cls(grid, tuple(np.zeros(grid.face_shape(a)) for a in range(grid.d)), t)

    @classmethod
    def from_function(cls, grid, func, t=0.0):
        """Sample ``func(x) -> (..., d)`` at face centers; wall-normal faces are zeroed."""
        comps = []
        for a in range(grid.d):
            vals = np.asarray(func(grid.face_centers(a)))[..., a]
            vals = np.array(vals, dtype=float)
            vals[_sl(grid.d, a, 0)] = 0.0
            vals[_sl(grid.d, a, -1)] = 0.0
            comps.append(vals)
        return cls(grid, tuple(comps), t)

    def copy(self):
        return VelocityField(self.grid, tuple(c.copy() for c in self.comps), self.t)

    def with_time(self, t):
        return VelocityField(self.grid, self.comps, t)

    def __add__(self, other):
        _check_same_grid(self, other)
        return VelocityField(self.grid, tuple(a + b for a, b in zip(self.comps, other.comps)), self.t)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return VelocityField(self.grid, tuple(a - b for a, b in zip(self.comps, other.comps)), self.t)

    def __mul__(self, s):
        return VelocityField(self.grid, tuple(float(s) * c for c in self.comps), self.t)

    __rmul__ = __mul__

    def max_abs(self) -> float:
        return max(float(np.abs(c).max()) for c in self.comps)

    def is_finite(self) -> bool:
        return all(bool(np.isfinite(c).all()) for c in self.comps)

    def cell_centered(self) -> np.ndarray:
        """Velocity averaged to cell centers, shape (*shape, d)."""
        d = self.grid.d
        out = [0.5 * (c[_sl(d, a, slice(1, None))] + c[_sl(d, a, slice(None, -1))]) for a, c in enumerate(self.comps)]
        return np.stack(out, axis=-1)


@dataclass
class PressureField:
    grid: StaggeredGrid
    p: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.p = self.p - self.p.mean()


@dataclass
class ForceField:
    grid: StaggeredGrid
    comps: tuple
    t: float = 0.0

    @classmethod
    def zeros(cls, grid, t=0.0):
        return cls(grid, tuple(np.zeros(grid.face_shape(a)) for a in range(grid.d)), t)

    @classmethod
    def from_cell_density(cls, grid, density, t=0.0):
        """Average a cell-centered density (shape (*shape, d)) to faces.

        Each cell value is split evenly between its two faces along every
        axis, so the face sum times cell volume equals the cell sum times
        cell volume whenever the density vanishes on wall-adjacent cells.
        """
        d = grid.d
        comps = []
        for a in range(d):
            c = np.zeros(grid.face_shape(a))
            da = density[..., a]
            c[_sl(d, a, slice(1, None))] += 0.5 * da
            c[_sl(d, a, slice(None, -1))] += 0.5 * da
            c[_sl(d, a, 0)] = 0.0
            c[_sl(d, a, -1)] = 0.0
            comps.append(c)
        return cls(grid, tuple(comps), t)

    def as_velocity(self) -> VelocityField:
        return VelocityField(self.grid, self.comps, self.t)

    def total(self) -> np.ndarray:
        """Discrete integral of f over the domain (grid sum times cell volume)."""
        return np.array([c.sum() for c in self.comps]) * self.grid.cell_volume

    def abs_total(self) -> float:
        return float(sum(np.abs(c).sum() for c in self.comps) * self.grid.cell_volume)


# ----------------------------------------------------------------------------
# discrete operators
# ----------------------------------------------------------------------------


def divergence(u: VelocityField) -> np.ndarray:
    g = u.grid
    d = g.d
    out = np.zeros(g.shape)
    for a, c in enumerate(u.comps):
        out += (c[_sl(d, a, slice(1, None))] - c[_sl(d, a, slice(None, -1))]) / g.h[a]
    return out


def gradient(phi: np.ndarray, grid: StaggeredGrid) -> VelocityField:
    d = grid.d
    comps = []
    for a in range(d):
        c = np.zeros(grid.face_shape(a))
        c[_sl(d, a, slice(1, -1))] = (phi[_sl(d, a, slice(1, None))] - phi[_sl(d, a, slice(None, -1))]) / grid.h[a]
        comps.append(c)
    return VelocityField(grid, tuple(comps))


def _laplacian_component(v, a, grid):
    d = grid.d
    out = np.zeros_like(v)
    inner = _sl(d, a, slice(1, -1))
    for b in range(d):
        h2 = grid.h[b] ** 2
        if b == a:
            out[inner] += (v[_sl(d, a, slice(2, None))] - 2.0 * v[inner] + v[_sl(d, a, slice(None, -2))]) / h2
        else:
            first = v[_sl(d, b, slice(0, 1))]
            last = v[_sl(d, b, slice(-1, None))]
            vp = np.concatenate([-first, v, -last], axis=b)
            out += (vp[_sl(d, b, slice(2, None))] - 2.0 * v + vp[_sl(d, b, slice(None, -2))]) / h2
    out[_sl(d, a, 0)] = 0.0
    out[_sl(d, a, -1)] = 0.0
    return out


def laplacian(u: VelocityField) -> VelocityField:
    return VelocityField(u.grid, tuple(_laplacian_component(c, a, u.grid) for a, c in enumerate(u.comps)), u.t)


def advect(u: VelocityField, v: VelocityField) -> VelocityField:
    """Skew-symmetric centered advection C(u)v on the MAC grid.

    Built from antisymmetric face fluxes, so <C(u)v, v> vanishes for every v
    (and equals (u.grad)v + div(u) v / 2 to second order).
    """
    g = _check_same_grid(u, v)
    d = g.d
    out = []
    for a in range(d):
        va = v.comps[a]
        r = np.zeros_like(va)
        inner = _sl(d, a, slice(1, -1))
        # flux through the control-volume faces normal to a (cell centers)
        uc = 0.5 * (u.comps[a][_sl(d, a, slice(1, None))] + u.comps[a][_sl(d, a, slice(None, -1))])
        r[inner] += (
            uc[_sl(d, a, slice(1, None))] * va[_sl(d, a, slice(2, None))]
            - uc[_sl(d, a, slice(None, -1))] * va[_sl(d, a, slice(None, -2))]
        ) / (2.0 * g.h[a])
        vin = va[inner]
        for b in range(d):
            if b == a:
                continue
            ub = u.comps[b]
            # u_b on the edges shared by neighbouring a-faces
            ue = 0.5 * (ub[_sl(d, a, slice(None, -1))] + ub[_sl(d, a, slice(1, None))])
            pad = [(0, 0)] * d
            pad[b] = (1, 1)
            vp = np.pad(vin, pad)
            r[inner] += (
                ue[_sl(d, b, slice(1, None))] * vp[_sl(d, b, slice(2, None))]
                - ue[_sl(d, b, slice(None, -1))] * vp[_sl(d, b, slice(None, -2))]
            ) / (2.0 * g.h[b])
        out.append(r)
    return VelocityField(g, tuple(out), u.t)


def inner(u, v) -> float:
    g = _check_same_grid(u, v)
    return float(sum(np.vdot(a, b) for a, b in zip(u.comps, v.comps)) * g.cell_volume)


def trilinear_form(u: VelocityField, v: VelocityField, w: VelocityField) -> float:
    """Discrete b(u, v, w) = sum_ij int u_i (D_i v_j) w_j dx."""
    _check_same_grid(u, v, w)
    return inner(advect(u, v), w)


def _component_grad_sq(v, a, grid):
    d = grid.d
    total = 0.0
    for b in range(d):
        h2 = grid.h[b] ** 2
        if b == a:
            diffs = np.diff(v, axis=b)
            total += float(np.sum(diffs**2)) / h2
        else:
            diffs = np.diff(v[_sl(d, a, slice(1, -1))], axis=b)
            edge = v[_sl(d, a, slice(1, -1))]
            boundary = 2.0 * (np.sum(edge[_sl(d, b, 0)] ** 2) + np.sum(edge[_sl(d, b, -1)] ** 2))
            total += (float(np.sum(diffs**2)) + float(boundary)) / h2
    return total * grid.cell_volume


class FieldNorms(NamedTuple):
    l2: float
    h1: float
    l4: float


def l2_norm(u) -> float:
    return math.sqrt(max(inner(u, u), 0.0))


def h1_norm(u: VelocityField) -> float:
    """Discrete H^1_0 seminorm, consistent with -<Lu, u>."""
    return math.sqrt(sum(_component_grad_sq(c, a, u.grid) for a, c in enumerate(u.comps)))


def l4_norm(u: VelocityField) -> float:
    return float(sum(np.sum(c**4) for c in u.comps) * u.grid.cell_volume) ** 0.25


def norms(u: VelocityField) -> FieldNorms:
    if not u.is_finite():
        raise DivergenceError("non-finite field", time=u.t)
    return FieldNorms(l2_norm(u), h1_norm(u), l4_norm(u))


def curl(u: VelocityField) -> np.ndarray:
    """Discrete curl at interior nodes (2-D scalar) or interior edges (3-D, per component)."""
    g = u.grid
    if g.d == 2:
        ux, uy = u.comps
        dvy_dx = np.diff(uy, axis=0)[:, 1:-1] / g.h[0]
        dux_dy = np.diff(ux, axis=1)[1:-1, :] / g.h[1]
        return dvy_dx - dux_dy
    out = []
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        # omega_a = D_b u_c - D_c u_b on interior a-edges
        dc = np.diff(u.comps[c], axis=b)
        db = np.diff(u.comps[b], axis=c)
        dc = dc[_sl(3, c, slice(1, -1))] / g.h[b]
        db = db[_sl(3, b, slice(1, -1))] / g.h[c]
        out.append(dc - db)
    return np.concatenate([o.ravel() for o in out])


# ----------------------------------------------------------------------------
# spectral solvers
# ----------------------------------------------------------------------------


def _eig(n, h, kind):
    if kind == "dst1":
        k = np.arange(1, n)
    elif kind == "dst2":
        k = np.arange(1, n + 1)
    else:
        k = np.arange(n)
    return -(2.0 - 2.0 * np.cos(np.pi * k / n)) / h**2


def _transform(x, kinds, inverse=False):
    w = _workers()
    for axis, kind in enumerate(kinds):
        if kind == "dst1":
            x = (sfft.idst if inverse else sfft.dst)(x, type=1, axis=axis, norm="ortho", workers=w)
        elif kind == "dst2":
            x = (sfft.idst if inverse else sfft.dst)(x, type=2, axis=axis, norm="ortho", workers=w)
        else:
            x = (sfft.idct if inverse else sfft.dct)(x, type=2, axis=axis, norm="ortho", workers=w)
    return x


@lru_cache(maxsize=32)
def _component_symbols(grid: StaggeredGrid, a: int):
    kinds = tuple("dst1" if b == a else "dst2" for b in range(grid.d))
    lam = 0.0
    for b, n in enumerate(grid.shape):
        e = _eig(n, grid.h[b], kinds[b])
        lam = lam + e.reshape(_shape_along(grid.shape, b, e.size))
    return kinds, lam


@lru_cache(maxsize=32)
def _pressure_symbol(grid: StaggeredGrid):
    lam = 0.0
    for b, n in enumerate(grid.shape):
        e = _eig(n, grid.h[b], "dct2")
        lam = lam + e.reshape(_shape_along(grid.shape, b, n))
    lam = np.array(lam, dtype=float)
    lam.flat[0] = 1.0
    return lam


def helmholtz_solve(rhs: np.ndarray, a: int, grid: StaggeredGrid, alpha: float) -> np.ndarray:
    """Solve (I - alpha L) x = rhs for velocity component a (full face array in/out)."""
    d = grid.d
    kinds, lam = _component_symbols(grid, a)
    inner_sl = _sl(d, a, slice(1, -1))
    xh = _transform(rhs[inner_sl], kinds) / (1.0 - alpha * lam)
    x = np.zeros(grid.face_shape(a))
    x[inner_sl] = _transform(xh, kinds, inverse=True)
    return x


def poisson_solve(div: np.ndarray, grid: StaggeredGrid, tol: float = POISSON_TOL) -> np.ndarray:
    """Zero-mean solution of D G phi = div with homogeneous Neumann walls."""
    kinds = ("dct2",) * grid.d
    lam = _pressure_symbol(grid)
    rh = _transform(div - div.mean(), kinds)
    ph = rh / lam
    ph.flat[0] = 0.0
    phi = _transform(ph, kinds, inverse=True)
    scale = float(np.abs(div).max())
    if scale > 0:
        resid = divergence(gradient(phi, grid)) - (div - div.mean())
        rel = float(np.abs(resid).max()) / scale
        if rel > tol:
            raise SolverError(f"Poisson residual {rel:.3e} exceeds tolerance {tol:.1e}", residual=rel)
    return phi


def project(u_star: VelocityField, dt: Optional[float] = None, tol: float = POISSON_TOL):
    """Remove the gradient part of u_star; returns (u, pressure).

    The pressure holds phi/dt when dt is given and phi otherwise.
    """
    g = u_star.grid
    phi = poisson_solve(divergence(u_star), g, tol)
    u = u_star - gradient(phi, g)
    u = VelocityField(g, u.comps, u_star.t)
    p = PressureField(g, phi / dt if dt else phi, u_star.t)
    return u, p


def relative_divergence(u: VelocityField) -> float:
    scale = u.max_abs() / u.grid.h_min
    div = float(np.abs(divergence(u)).max())
    return div / scale if scale > 0 else div


# ----------------------------------------------------------------------------
# time stepping
# ----------------------------------------------------------------------------


def cfl_dt(u: VelocityField, cfl: float = 0.5) -> float:
    umax = u.max_abs()
    return math.inf if umax == 0 else cfl * u.grid.h_min / umax


def nse_step(
    u: VelocityField,
    f: Optional[ForceField],
    dt: float,
    with_pressure: bool = False,
    tol: float = POISSON_TOL,
    p: Optional[PressureField] = None,
):
    """One semi-implicit step; returns the new velocity (and pressure if asked).

    Incremental pressure correction: the previous pressure p enters the
    momentum predictor and the projection potential is accumulated onto it.
    """
    g = u.grid
    if not dt > 0:
        raise ValueError("dt must be positive")
    limit = cfl_dt(u)
    if dt > limit * (1 + 1e-12):
        raise CFLError(f"dt={dt:.3e} violates advective CFL (max {limit:.3e})", admissible_dt=limit)
    alpha = 0.5 * g.nu * dt
    adv = advect(u, u)
    lap = laplacian(u)
    gp = gradient(p.p, g) if p is not None else None
    comps = []
    for a in range(g.d):
        rhs = u.comps[a] + dt * (0.5 * g.nu * lap.comps[a] - adv.comps[a])
        if f is not None:
            rhs = rhs + dt * f.comps[a]
        if gp is not None:
            rhs = rhs - dt * gp.comps[a]
        comps.append(helmholtz_solve(rhs, a, g, alpha))
    u_new, phi = project(VelocityField(g, tuple(comps), u.t + dt), dt=dt, tol=tol)
    p_new = PressureField(g, phi.p + (p.p if p is not None else 0.0), u.t + dt)
    if not u_new.is_finite():
        raise DivergenceError(f"non-finite velocity at t={u.t + dt:.6g}", time=u.t + dt)
    return (u_new, p_new) if with_pressure else u_new


@dataclass
class NSETrajectory:
    grid: StaggeredGrid
    dt: float
    times: np.ndarray
    fields: list
    pressures: list
    forces: list
    l2: np.ndarray
    h1: np.ndarray
    divergence: np.ndarray
    energy_residual: np.ndarray
    force_l2: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def l2v_norm(self) -> float:
        """||u||_{L^2(0,T;V)} by the trapezoid rule."""
        return math.sqrt(float(np.trapezoid(self.h1**2, self.times)))

    @property
    def ch_norm(self) -> float:
        return float(self.l2.max())

    @property
    def l2h_norm(self) -> float:
        return math.sqrt(float(np.trapezoid(self.l2**2, self.times)))

    @property
    def force_norm(self) -> float:
        """||f||_{L^2(0,T;L^2)} for forcing held constant over each step."""
        return math.sqrt(float(np.sum(self.force_l2**2) * self.dt))

    def at(self, t: float) -> VelocityField:
        """Velocity at time t by linear interpolation between stored samples."""
        if not self.fields:
            raise ValueError("trajectory stores no fields")
        t = min(max(t, self.times[0]), self.times[-1])
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), len(self.times) - 2)
        t0, t1 = self.times[k], self.times[k + 1]
        s = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        u0, u1 = self.fields[k], self.fields[k + 1]
        return VelocityField(self.grid, tuple((1 - s) * a + s * b for a, b in zip(u0.comps, u1.comps)), t)


def energy_step_residual(u_old, u_new, f, dt) -> float:
    """|d(1/2||u||^2) + nu dt ||grad u_mid||^2 - dt <f, u_mid>| for one step."""
    nu = u_old.grid.nu
    mid = 0.5 * (u_old + u_new)
    de = 0.5 * (inner(u_new, u_new) - inner(u_old, u_old))
    work = inner(f.as_velocity(), mid) if f is not None else 0.0
    return abs(de + nu * dt * h1_norm(mid) ** 2 - dt * work)


def solve_nse(
    u0: VelocityField,
    f_of_t: Optional[Callable[[float], Optional[ForceField]]],
    horizon: float,
    dt: float,
    store: bool = True,
    tol: float = POISSON_TOL,
) -> NSETrajectory:
    """Uncoupled solve on [t0, t0 + horizon]; f_of_t is sampled at step midpoints."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    n = max(1, int(math.ceil(horizon / dt - 1e-9)))
    dt = horizon / n
    u, _ = project(u0, tol=tol)
    t0 = u0.t
    u = u.with_time(t0)
    g = u.grid
    times = t0 + dt * np.arange(n + 1)
    fields, pressures, forces = ([u] if store else []), [], []
    p = None
    l2 = np.empty(n + 1)
    h1 = np.empty(n + 1)
    div = np.zeros(n + 1)
    eres = np.zeros(n)
    fl2 = np.zeros(n)
    l2[0], h1[0] = l2_norm(u), h1_norm(u)
    div[0] = float(np.abs(divergence(u)).max())
    for k in range(n):
        tm = times[k] + 0.5 * dt
        f = f_of_t(tm) if f_of_t is not None else None
        try:
            u_new, p = nse_step(u, f, dt, with_pressure=True, tol=tol, p=p)
        except DivergenceError as exc:
            exc.time = times[k + 1]
            raise
        u_new = u_new.with_time(times[k + 1])
        eres[k] = energy_step_residual(u, u_new, f, dt)
        fl2[k] = l2_norm(f.as_velocity()) if f is not None else 0.0
        u = u_new
        l2[k + 1], h1[k + 1] = l2_norm(u), h1_norm(u)
        div[k + 1] = float(np.abs(divergence(u)).max())
        if store:
            fields.append(u)
            pressures.append(p)
            forces.append(f)
    return NSETrajectory(g, dt, times, fields, pressures, forces, l2, h1, div, eres, fl2)


# ----------------------------------------------------------------------------
# constants and bounds
# ----------------------------------------------------------------------------


def poincare_constant(grid: StaggeredGrid) -> float:
    return grid.diam / math.pi


def stability_constant(grid: StaggeredGrid) -> float:
    """Explicit L_S with ||u||_C(H) + ||u||_L2(V) <= L_S (||u0|| + ||f||_L2L2).

    From d/dt||u||^2 + nu||grad u||^2 <= (C_P^2/nu)||f||^2 with C_P the
    Poincare constant.
    """
    nu = grid.nu
    return (1.0 + 1.0 / math.sqrt(nu)) * max(1.0, poincare_constant(grid) / math.sqrt(nu))


def stokes_bound_check(traj: NSETrajectory, u0_norm: Optional[float] = None) -> dict:
    u0n = traj.l2[0] if u0_norm is None else u0_norm
    ls = stability_constant(traj.grid)
    lhs = traj.ch_norm + traj.l2v_norm
    rhs = ls * (u0n + traj.force_norm)
    return {"lhs": lhs, "rhs": rhs, "L_S": ls, "holds": lhs <= rhs}


def s_lipschitz_bound(grid: StaggeredGrid, u_l2v_max: float) -> float:
    """(2 C_P / nu) exp((4/nu) max ||u_i||^2_{L2(V)}), the square root of the 2-D difference estimate."""
    nu = grid.nu
    return 2.0 * poincare_constant(grid) / nu * math.exp(4.0 / nu * u_l2v_max**2)


def difference_estimate_check(t1: NSETrajectory, t2: NSETrajectory) -> dict:
    """Check ||u1-u2||^2_L2(V) <= 4C^2/nu^2 exp(8/nu max||u_i||^2) ||f1-f2||^2."""
    g = t1.grid
    diff = [a - b for a, b in zip(t1.fields, t2.fields)]
    h1d = np.array([h1_norm(x) for x in diff])
    lhs = float(np.trapezoid(h1d**2, t1.times))
    df = []
    for f1, f2 in zip(t1.forces, t2.forces):
        z = ForceField.zeros(g)
        a = (f1 or z).as_velocity()
        b = (f2 or z).as_velocity()
        df.append(l2_norm(a - b))
    fdiff = float(np.sum(np.array(df) ** 2) * t1.dt)
    m = max(t1.l2v_norm, t2.l2v_norm)
    rhs = s_lipschitz_bound(g, m) ** 2 * fdiff
    return {"lhs": lhs, "rhs": rhs, "holds": lhs <= rhs}


# ----------------------------------------------------------------------------
# pressure recovery
# ----------------------------------------------------------------------------


def recover_pressure_gradient(traj: NSETrajectory, f_of_t, k: int) -> dict:
    """Evaluate f - u_t + nu Lap u - (u.grad)u at stored sample k (central u_t)."""
    if k <= 0 or k >= len(traj.fields) - 1:
        raise NeedsInteriorTimeError(f"sample {k} has no central difference")
    g = traj.grid
    u = traj.fields[k]
    ut = (traj.fields[k + 1] - traj.fields[k - 1]) * (1.0 / (traj.times[k + 1] - traj.times[k - 1]))
    f = f_of_t(traj.times[k]) if f_of_t is not None else None
    rec = laplacian(u) * g.nu - ut - advect(u, u)
    if f is not None:
        rec = rec + f.as_velocity()
    # zero the wall-normal faces: only interior faces carry a pressure gradient
    rec = VelocityField(g, rec.comps, traj.times[k])
    scale = max(l2_norm(rec), 1e-300)
    out = {"gradient": rec, "curl_defect": float(np.sqrt(np.sum(curl(rec) ** 2) * g.cell_volume))}
    out["curl_defect_rel"] = out["curl_defect"] * g.h_min / scale if scale > 1e-300 else 0.0
    if traj.pressures:
        # the projection pressure of step k-1 -> k lives at t_k
        gp = gradient(traj.pressures[k - 1].p, g)
        out["mismatch"] = l2_norm(rec - gp)
        out["mismatch_rel"] = out["mismatch"] / scale if scale > 1e-300 else 0.0
    return out


# ----------------------------------------------------------------------------
# interpolation and export
# ----------------------------------------------------------------------------


def velocity_interpolator(u: VelocityField) -> Callable[[np.ndarray], np.ndarray]:
    """Multilinear interpolant of the staggered field; returns values (..., d)."""
    g = u.grid
    d = g.d
    interps = []
    for a, c in enumerate(u.comps):
        axes = g.face_axes(a)
        vals = c
        for b in range(d):
            if b == a:
                continue
            axes[b] = np.concatenate([[g.lo[b]], axes[b], [g.hi[b]]])
            pad = [(0, 0)] * d
            pad[b] = (1, 1)
            vals = np.pad(vals, pad)
        interps.append(RegularGridInterpolator(tuple(axes), vals, bounds_error=False, fill_value=0.0))

    def evaluate(points):
        pts = np.asarray(points, dtype=float)
        flat = pts.reshape(-1, d)
        out = np.stack([it(flat) for it in interps], axis=-1)
        return out.reshape(pts.shape[:-1] + (d,))

    return evaluate


def write_snapshot_bin(path, u: VelocityField) -> None:
    g = u.grid
    header = f"{SNAPSHOT_MAGIC} d={g.d} n={'x'.join(str(n) for n in g.shape)} t={u.t:.17g}"
    if len(header) > HEADER_BYTES - 1:
        raise ValueError("snapshot header overflow")
    with open(path, "wb") as fh:
        fh.write(header.ljust(HEADER_BYTES - 1).encode("ascii") + b"\n")
        for c in u.comps:
            fh.write(np.ascontiguousarray(c, dtype="<f8").tobytes())


def read_snapshot_bin(path, grid: StaggeredGrid) -> VelocityField:
    with open(path, "rb") as fh:
        raw = fh.read()
    header = raw[:HEADER_BYTES].decode("ascii").split()
    if not header or header[0] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a velocity snapshot")
    kv = dict(item.split("=", 1) for item in header[1:])
    shape = tuple(int(n) for n in kv["n"].split("x"))
    if int(kv["d"]) != grid.d or shape != grid.shape:
        raise DimensionError(f"{path}: snapshot grid {shape} does not match {grid.shape}")
    data = np.frombuffer(raw[HEADER_BYTES:], dtype="<f8")
    comps, off = [], 0
    for a in range(grid.d):
        size = int(np.prod(grid.face_shape(a)))
        comps.append(data[off : off + size].reshape(grid.face_shape(a)).copy())
        off += size
    return VelocityField(grid, tuple(comps), float(kv["t"]))


def write_snapshot_csv(path, u: VelocityField) -> None:
    g = u.grid
    xc = g.cell_centers().reshape(-1, g.d)
    uc = u.cell_centered().reshape(-1, g.d)
    names = ["x", "y", "z"][: g.d] + ["u", "v", "w"][: g.d]
    np.savetxt(path, np.hstack([xc, uc]), delimiter=",", header=",".join(names), comments="", fmt="%.12e")


def snapshot_header_fields(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_BYTES)
    parts = raw.decode("ascii").split()
    return dict(item.split("=", 1) for item in parts[1:])


def pack_float(x: float) -> bytes:
    return struct.pack("<d", x)
