"""Body template shapes, rasterization and section/shift geometry.

Shapes are described implicitly by a vectorized membership predicate in
coordinates centered at the shape's centroid.  Section measures of the
symmetric difference between a shape and its shifted copy are computed by
dense 1-D sampling followed by bisection at every membership change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import null_space

from .errors import GeometryViolation, ParameterError
from .fluid import StaggeredGrid

SHAPE_KINDS = ("disc", "rectangle", "ball", "box", "sawtooth")


def _sawtooth_triangles(kappa, n_max):
    """(area, centroid) of the triangles making up the sawtooth set."""
    tris = [(0.25, np.array([0.5, -1.0 / 6.0]))]
    for m in range(1, n_max + 1):
        base = 2.0**-m
        tris.append((0.5 * kappa * base * base, np.array([1.5 * base, kappa * base / 3.0])))
    return tris


def _sawtooth_vertices(kappa, n_max):
    pts = [(0.0, 0.0), (1.0, 0.0), (0.5, -0.5)]
    for m in range(1, n_max + 1):
        base = 2.0**-m
        pts += [(base, 0.0), (2 * base, 0.0), (1.5 * base, kappa * base)]
    return np.array(pts)


@dataclass(frozen=True)
class ShapeSpec:
    """Template body S(0), centered at its centroid.

    ``params`` holds radius for disc/ball, half-widths for rectangle/box and
    (kappa, n_max) for the sawtooth set ``sawtooth``.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ParameterError(f"unknown shape kind {self.kind!r}")
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        need = {"disc": 1, "ball": 1, "rectangle": 2, "box": 3, "sawtooth": 2}[self.kind]
        if len(params) != need:
            raise ParameterError(f"{self.kind} takes {need} parameter(s), got {len(params)}")
        if self.kind == "sawtooth":
            if params[0] <= 0 or params[1] < 1:
                raise ParameterError("sawtooth needs kappa > 0 and n_max >= 1")
        elif any(p <= 0 for p in params):
            raise ParameterError(f"{self.kind} lengths must be positive")

    @classmethod
    def disc(cls, radius):
        return cls("disc", (radius,))

    @classmethod
    def ball(cls, radius):
        return cls("ball", (radius,))

    @classmethod
    def rectangle(cls, a, b):
        return cls("rectangle", (a, b))

    @classmethod
    def box(cls, a, b, c):
        return cls("box", (a, b, c))

    @classmethod
    def sawtooth(cls, kappa=1.0, n_max=12):
        return cls("sawtooth", (kappa, int(n_max)))

    @property
    def d(self) -> int:
        return 3 if self.kind in ("ball", "box") else 2

    @property
    def centroid_offset(self) -> np.ndarray:
        """Centroid of the raw (uncentered) set; zero for the symmetric shapes."""
        if self.kind != "sawtooth":
            return np.zeros(self.d)
        kappa, n_max = self.params
        tris = _sawtooth_triangles(kappa, int(n_max))
        area = sum(a for a, _ in tris)
        return sum(a * c for a, c in tris) / area

    @property
    def measure(self) -> float:
        k = self.kind
        p = self.params
        if k == "disc":
            return math.pi * p[0] ** 2
        if k == "ball":
            return 4.0 / 3.0 * math.pi * p[0] ** 3
        if k == "rectangle":
            return 4.0 * p[0] * p[1]
        if k == "box":
            return 8.0 * p[0] * p[1] * p[2]
        kappa, n_max = p
        return 0.25 + kappa / 6.0 - kappa * 4.0 ** (-n_max) / 6.0

    @property
    def truncation_error(self) -> float:
        """Measure dropped by truncating the sawtooth family (0 for other shapes)."""
        if self.kind != "sawtooth":
            return 0.0
        kappa, n_max = self.params
        return kappa * 4.0 ** (-n_max) / 6.0

    @property
    def bounding_radius(self) -> float:
        k = self.kind
        p = self.params
        if k in ("disc", "ball"):
            return p[0]
        if k in ("rectangle", "box"):
            return float(np.linalg.norm(p))
        verts = _sawtooth_vertices(*p[:1], int(p[1]))
        return float(np.linalg.norm(verts - self.centroid_offset, axis=1).max())

    @property
    def feature_size(self) -> float:
        """Smallest geometric feature; section sampling never steps coarser than a fraction of it."""
        if self.kind == "sawtooth":
            return 2.0 ** (-self.params[1])
        return min(self.params)

    @property
    def convex(self) -> bool:
        return self.kind != "sawtooth"

    @property
    def default_h0(self) -> float:
        return 1.0 if self.kind == "sawtooth" else self.bounding_radius / 2.0

    def contains(self, points) -> np.ndarray:
        """Open-set membership of points (..., d) given relative to the centroid."""
        p = np.asarray(points, dtype=float)
        if p.shape[-1] != self.d:
            raise ParameterError(f"{self.kind} is {self.d}-D, got points of dimension {p.shape[-1]}")
        k = self.kind
        if k in ("disc", "ball"):
            return np.sum(p * p, axis=-1) < self.params[0] ** 2
        if k in ("rectangle", "box"):
            return np.all(np.abs(p) < np.array(self.params), axis=-1)
        kappa, n_max = self.params
        raw = p + self.centroid_offset
        x, y = raw[..., 0], raw[..., 1]
        inside_x = (x > 0.0) & (x < 1.0)
        alpha = np.where(x <= 0.5, -x, x - 1.0)
        # x in [2^-m, 2^-m+1) gives m = 1 - exponent
        _, e = np.frexp(np.where(inside_x, x, 0.5))
        m = 1 - e
        base = np.ldexp(1.0, -m)
        beta = np.maximum(0.0, kappa * base - 2.0 * kappa * np.abs(x - 1.5 * base))
        beta = np.where((m >= 1) & (m <= n_max), beta, 0.0)
        return inside_x & (y > alpha) & (y < beta)


# ----------------------------------------------------------------------------
# rasterization
# ----------------------------------------------------------------------------


@dataclass
class IndicatorField:
    mask: np.ndarray
    discrete_measure: float
    center: np.ndarray
    body: Optional[int] = None

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def rasterize_indicator(shape: ShapeSpec, center, grid: StaggeredGrid, body: Optional[int] = None) -> IndicatorField:
    """Cell-center membership of S(center); raises if the body leaves the domain."""
    c = np.asarray(center, dtype=float)
    if c.shape != (grid.d,) or shape.d != grid.d:
        raise ParameterError(f"shape/center dimension does not match {grid.d}-D grid")
    r = shape.bounding_radius
    if not grid.contains(c, margin=r):
        raise GeometryViolation(f"body {body if body is not None else '?'} at {c.tolist()} escapes the domain", body=body)
    mask = np.zeros(grid.shape, dtype=bool)
    # only test cells inside the bounding box of the body
    sl = []
    for a in range(grid.d):
        i0 = max(0, int(math.floor((c[a] - r - grid.lo[a]) / grid.h[a])) - 1)
        i1 = min(grid.shape[a], int(math.ceil((c[a] + r - grid.lo[a]) / grid.h[a])) + 1)
        sl.append(slice(i0, i1))
    axes = [grid.lo[a] + (np.arange(s.start, s.stop) + 0.5) * grid.h[a] for a, s in enumerate(sl)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    mask[tuple(sl)] = shape.contains(pts - c)
    n = int(mask.sum())
    if n == 0:
        raise GeometryViolation(f"body {body if body is not None else '?'} covers no grid cell", body=body)
    return IndicatorField(mask, n * grid.cell_volume, c, body)


# ----------------------------------------------------------------------------
# sections of shifted shapes
# ----------------------------------------------------------------------------


def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if abs(n - 1.0) > 1e-12:
        raise ParameterError(f"direction must be a unit vector, |v| = {n!r}")
    return v


def _membership_length(member: Callable[[np.ndarray], np.ndarray], t: np.ndarray, iters: int = 60) -> float:
    """Length of {t : member(t)} on [t[0], t[-1]], bisecting each sampled switch."""
    inside = member(t)
    if not inside.any():
        return 0.0
    switch = np.nonzero(inside[1:] != inside[:-1])[0]
    a = t[switch].copy()
    b = t[switch + 1].copy()
    left_state = inside[switch]
    for _ in range(iters):
        mid = 0.5 * (a + b)
        same = member(mid) == left_state
        a = np.where(same, mid, a)
        b = np.where(same, b, mid)
    cuts = 0.5 * (a + b)
    # sampled runs are exact between cuts; accumulate the inside runs
    edges = np.concatenate([[t[0]], cuts, [t[-1]]])
    states = np.concatenate([[inside[0]], ~left_state]) if switch.size else np.array([inside[0]])
    return float(np.sum(np.diff(edges)[states]))


def sym_diff_section_measure(shape: ShapeSpec, h, eta, y, step: Optional[float] = None) -> float:
    """1-D measure of the line {y + t eta} inside (h + S(0)) symmetric-difference S(0).

    ``y`` is a point in the hyperplane orthogonal to ``eta`` (any component
    along ``eta`` is discarded).  Sampling is never coarser than |h|/64 nor
    than an eighth of the shape's smallest feature.
    """
    h = np.asarray(h, dtype=float)
    hn = float(np.linalg.norm(h))
    if hn == 0.0:
        return 0.0
    eta = _unit(eta)
    y = np.asarray(y, dtype=float)
    y = y - np.dot(y, eta) * eta
    reach = shape.bounding_radius + hn
    if np.linalg.norm(y) >= reach:
        return 0.0
    ds = min(hn / 64.0, shape.feature_size / 8.0) if step is None else step
    n = int(math.ceil(2 * reach / ds)) + 1
    t = np.linspace(-reach, reach, n)

    def member(tt):
        p = y + tt[:, None] * eta
        return shape.contains(p) ^ shape.contains(p - h)

    return _membership_length(member, t)


@dataclass
class H2Sample:
    h: np.ndarray
    y: np.ndarray
    eta: np.ndarray
    measure: float
    ratio: float
    passed: Optional[bool] = None


@dataclass
class H2Report:
    eta_rule: str
    h0: float
    ks_estimate: float
    witness: Optional[H2Sample]
    samples: list = field(default_factory=list)
    claimed_ks: Optional[float] = None

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def all_pass(self) -> bool:
        return all(s.passed is not False for s in self.samples)

    def rows(self):
        for s in self.samples:
            yield list(s.h) + list(s.y) + [s.measure, s.ratio]


def eta_along_h(h):
    h = np.asarray(h, dtype=float)
    return h / np.linalg.norm(h)


def eta_fixed(direction):
    direction = _unit(direction)

    def rule(h):
        return direction

    rule.__name__ = "fixed" + str(tuple(direction.tolist()))
    return rule


def _resolve_eta_rule(rule):
    if callable(rule):
        return rule, getattr(rule, "__name__", "custom")
    if rule in ("along_h", "h", None):
        return eta_along_h, "along_h"
    if isinstance(rule, str) and rule.startswith("fixed:"):
        vec = [float(x) for x in rule.split(":", 1)[1].strip("() ").split(",")]
        return eta_fixed(vec), rule
    return eta_fixed(rule), "fixed" + str(tuple(rule))


def hyperplane_points(eta, extent: float, resolution: int) -> np.ndarray:
    """Grid of points in the hyperplane orthogonal to eta, centered at 0.

    Uses ``resolution`` points per in-plane axis on [-extent, extent]; an
    odd resolution keeps 0 in the grid and refining n -> 2n-1 nests grids.
    """
    eta = np.asarray(eta, dtype=float)
    basis = null_space(eta[None, :])  # (d, d-1)
    s = np.linspace(-extent, extent, resolution)
    mesh = np.meshgrid(*([s] * basis.shape[1]), indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=-1)
    return coords @ basis.T


def estimate_KS(
    shape: ShapeSpec,
    eta_rule="along_h",
    h_samples: Optional[Sequence] = None,
    y_resolution: int = 33,
    h0: Optional[float] = None,
    claimed_ks: Optional[float] = None,
) -> H2Report:
    """Sampled sup of section measure / |h| over shifts and hyperplane offsets."""
    rule, name = _resolve_eta_rule(eta_rule)
    h0 = shape.default_h0 if h0 is None else float(h0)
    if h_samples is None or len(h_samples) == 0:
        raise ParameterError("h_samples must be nonempty")
    samples = []
    worst = None
    for h in h_samples:
        h = np.asarray(h, dtype=float)
        hn = float(np.linalg.norm(h))
        if not 0 < hn < h0:
            raise ParameterError(f"shift |h|={hn} outside (0, h0={h0})")
        eta = np.asarray(rule(h), dtype=float)
        extent = shape.bounding_radius + hn
        for y in hyperplane_points(eta, extent, y_resolution):
            meas = sym_diff_section_measure(shape, h, eta, y)
            s = H2Sample(h, y, eta, meas, meas / hn)
            if claimed_ks is not None:
                s.passed = meas <= claimed_ks * hn * (1 + 1e-9)
            samples.append(s)
            if worst is None or s.ratio > worst.ratio:
                worst = s
    return H2Report(name, h0, worst.ratio if worst else 0.0, worst, samples, claimed_ks)


# ----------------------------------------------------------------------------
# sections of scalar fields
# ----------------------------------------------------------------------------


@dataclass
class NodalField:
    """Scalar field on the nodes of a uniform box grid, zero on the walls."""

    lo: tuple
    hi: tuple
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.lo = tuple(float(x) for x in self.lo)
        self.hi = tuple(float(x) for x in self.hi)

    @classmethod
    def from_function(cls, lo, hi, shape, func):
        axes = [np.linspace(a, b, n + 1) for a, b, n in zip(lo, hi, shape)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        vals = np.asarray(func(pts), dtype=float)
        f = cls(lo, hi, vals)
        f.zero_walls()
        return f

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def h(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / (np.array(self.values.shape) - 1)

    @property
    def axes(self) -> list:
        return [np.linspace(a, b, n) for a, b, n in zip(self.lo, self.hi, self.values.shape)]

    @property
    def diam(self) -> float:
        return float(np.linalg.norm(np.array(self.hi) - np.array(self.lo)))

    def zero_walls(self):
        for a in range(self.d):
            idx = [slice(None)] * self.d
            idx[a] = 0
            self.values[tuple(idx)] = 0.0
            idx[a] = -1
            self.values[tuple(idx)] = 0.0

    def h1_norm(self) -> float:
        """Forward-difference H^1_0 seminorm (dominates that of the multilinear interpolant)."""
        vol = float(np.prod(self.h))
        total = 0.0
        for a in range(self.d):
            total += float(np.sum(np.diff(self.values, axis=a) ** 2)) / self.h[a] ** 2
        return math.sqrt(total * vol)

    def interpolator(self):
        return RegularGridInterpolator(tuple(self.axes), self.values, bounds_error=False, fill_value=0.0)


def _box_section_interval(lo, hi, y, nu):
    """Parameter interval {t : y + t nu in the open box}; None when empty."""
    t0, t1 = -np.inf, np.inf
    for a in range(len(lo)):
        if abs(nu[a]) < 1e-15:
            if not lo[a] < y[a] < hi[a]:
                return None
            continue
        ta, tb = (lo[a] - y[a]) / nu[a], (hi[a] - y[a]) / nu[a]
        t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
    return (t0, t1) if t1 > t0 else None


def section_of_field(w: NodalField, nu, y, step: Optional[float] = None, interp=None):
    """Samples (t, w(y + t nu)) over the section of the box through y."""
    nu = _unit(nu)
    y = np.asarray(y, dtype=float)
    iv = _box_section_interval(w.lo, w.hi, y, nu)
    if iv is None:
        return np.empty(0), np.empty(0)
    ds = float(w.h.min()) if step is None else step
    n = max(2, int(math.ceil((iv[1] - iv[0]) / ds)) + 1)
    t = np.linspace(iv[0], iv[1], n)
    it = interp if interp is not None else w.interpolator()
    pts = y + t[:, None] * nu
    # clip roundoff at the walls
    pts = np.clip(pts, w.lo, w.hi)
    return t, it(pts)


def sobolev_section_constant(diam: float) -> float:
    return math.sqrt(diam) / 2.0


def fubini_section_constant(diam: float, d: int) -> float:
    """Square root of the (d-1)-measure of the shadow of a ball of diameter diam."""
    if d == 2:
        return math.sqrt(diam)
    return math.sqrt(math.pi * (diam / 2.0) ** 2)


@dataclass
class SectionReport:
    c_omega: float
    c_omega_prime: float
    worst_ratio_i: float
    worst_ratio_ii: float
    per_direction: list
    tolerance: float = 1.05

    @property
    def holds(self) -> bool:
        return self.worst_ratio_i <= self.tolerance and self.worst_ratio_ii <= self.tolerance


def verify_section_inequalities(w: NodalField, nu_samples, tolerance: float = 1.05) -> SectionReport:
    """Check sup-norm and integrated-section bounds for w along each direction.

    Ratios are LHS / RHS; (i) is sup over y of ||w_y||_inf / (c ||w_y'||),
    (ii) is the Riemann sum of ||w_y'|| over the hyperplane divided by
    c' ||w||_{H^1_0}.
    """
    d = w.d
    diam = w.diam
    c1 = sobolev_section_constant(diam)
    c2 = fubini_section_constant(diam, d)
    center = 0.5 * (np.array(w.lo) + np.array(w.hi))
    ds = float(w.h.min())
    it = w.interpolator()
    w_h1 = w.h1_norm()
    per = []
    worst_i = worst_ii = 0.0
    for nu in nu_samples:
        nu = np.asarray(nu, dtype=float)
        nu = nu / np.linalg.norm(nu)
        res = int(math.ceil(diam / ds)) | 1
        ys = hyperplane_points(nu, diam / 2.0, res) + center
        dy = diam / (res - 1)
        integral = 0.0
        r_i = 0.0
        for y in ys:
            t, g = section_of_field(w, nu, y, step=ds / 2, interp=it)
            if t.size < 2:
                continue
            gp = np.sqrt(np.sum(np.diff(g) ** 2 / np.diff(t)))
            gmax = float(np.abs(g).max())
            integral += gp * dy ** (d - 1)
            if gp > 0:
                r_i = max(r_i, gmax / (c1 * gp))
            elif gmax > 0:
                r_i = math.inf
        r_ii = integral / (c2 * w_h1) if w_h1 > 0 else (0.0 if integral == 0 else math.inf)
        per.append({"nu": nu, "ratio_i": r_i, "ratio_ii": r_ii, "integral": integral, "rhs_ii": c2 * w_h1})
        worst_i, worst_ii = max(worst_i, r_i), max(worst_ii, r_ii)
    return SectionReport(c1, c2, worst_i, worst_ii, per, tolerance)


def random_bandlimited_field(rng: np.random.Generator, lo, hi, shape, modes: int = 4) -> NodalField:
    """Random finite sine series vanishing on the box walls."""
    d = len(shape)
    coef = rng.standard_normal((modes,) * d)
    ks = np.indices((modes,) * d).reshape(d, -1).T + 1
    decay = 1.0 / (1.0 + np.sum(ks**2, axis=1))
    lo_a, hi_a = np.array(lo, float), np.array(hi, float)

    def func(pts):
        s = (pts - lo_a) / (hi_a - lo_a)
        out = np.zeros(pts.shape[:-1])
        for k, c, wgt in zip(ks, coef.ravel(), decay):
            term = np.ones(pts.shape[:-1])
            for a in range(d):
                term = term * np.sin(math.pi * k[a] * s[..., a])
            out += c * wgt * term
        return out

    return NodalField.from_function(lo, hi, shape, func)
