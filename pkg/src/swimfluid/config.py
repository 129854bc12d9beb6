"""INI-style simulation config: parsing, defaults and validation."""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, SwimfluidError
from .fluid import StaggeredGrid, VelocityField, divergence, read_snapshot_bin, relative_divergence
from .forces import ELASTIC_VARIANTS, ROT3D_VARIANTS, ForceSchedule, ScheduleTable
from .geometry import ShapeSpec
from .swimmer import geometry_guard

DEFAULTS = {
    "domain": {"nu": "0.05"},
    "time": {"T": "1.0", "T_star": "0.1", "dt": "auto", "cfl": "0.5"},
    "swimmer": {"shape": "disc(0.05)", "ks": "2.0"},
    "initial": {"u0": "zero"},
    "forces": {"variant": "hooke", "rot3d": "balanced"},
    "solver": {"tol": "1e-6", "max_iter": "50", "mode": "interval", "c0": "1.0", "safety": "0.9"},
    "output": {"snapshot_every": "0", "format": "bin"},
    "probe": {"seed": "0", "pairs": "20", "fields": "20", "directions": "8"},
    "h2": {"eta": "along_h", "h_samples": "16", "y_resolution": "33"},
}

_SHAPE_RE = re.compile(r"^\s*(\w+)\s*\(([^)]*)\)\s*$")
_SQUARE_RE = re.compile(r"^\s*square\s*\(([^)]*)\)\s*$")


@dataclass
class SimulationConfig:
    grid: StaggeredGrid
    shape: ShapeSpec
    positions: np.ndarray
    u0_spec: str
    schedule: ForceSchedule
    T: float
    T_star: Optional[float]
    dt: Optional[float]
    cfl: float
    tol: float
    max_iter: int
    mode: str
    c0: float
    safety: float
    ks: float
    h0: Optional[float]
    snapshot_every: int
    fmt: str
    seed: int
    pairs: int
    n_fields: int
    n_directions: int
    h2: dict
    path: Optional[str] = None
    warnings: list = field(default_factory=list)
    echo: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.grid.d

    def initial_velocity(self) -> VelocityField:
        return initial_velocity(self.u0_spec, self.grid, base=Path(self.path).parent if self.path else None)


def _line_index(text: str) -> dict:
    """Map (section, key) and section names to 1-based line numbers."""
    out = {}
    section = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            out[(section, None)] = n
        elif "=" in s and section is not None and not s.startswith(("#", ";")):
            out[(section, s.split("=", 1)[0].strip().lower())] = n
    return out


def _floats(text, n=None, what="value", line=None):
    try:
        vals = [float(x) for x in re.split(r"[,\s]+", text.strip()) if x]
    except ValueError:
        raise ConfigError(f"{what}: expected numbers, got {text!r}", line)
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what}: expected {n} numbers, got {len(vals)}", line)
    return vals


def parse_shape(text: str, line=None) -> ShapeSpec:
    m = _SHAPE_RE.match(text)
    if not m:
        raise ConfigError(f"shape: expected kind(params), got {text!r}", line)
    kind, args = m.group(1), m.group(2)
    try:
        return ShapeSpec(kind, tuple(_floats(args, what="shape", line=line)))
    except SwimfluidError as exc:
        raise ConfigError(f"shape: {exc}", line)


def parse_schedule_value(text: str, horizon: float, line=None) -> ScheduleTable:
    m = _SQUARE_RE.match(text)
    try:
        if m:
            amp, period = _floats(m.group(1), 2, "square(amp, period)", line)
            return ScheduleTable.square(amp, period, horizon)
        return ScheduleTable.parse(text)
    except (ValueError, SwimfluidError) as exc:
        raise ConfigError(f"schedule {text!r}: {exc}", line)


def _named_vortex(x, lo, ext, amp, d):
    s = (x - lo) / ext
    sx, sy = s[..., 0], s[..., 1]
    # stream function amp/pi * sin^2(pi sx) sin^2(pi sy), exactly solenoidal
    u = amp / ext[1] * np.sin(np.pi * sx) ** 2 * np.sin(2 * np.pi * sy)
    v = -amp / ext[0] * np.sin(np.pi * sy) ** 2 * np.sin(2 * np.pi * sx)
    comps = [u, v]
    if d == 3:
        gz = np.sin(np.pi * s[..., 2])
        comps = [u * gz, v * gz, np.zeros_like(u)]
    return np.stack(comps, axis=-1)


def initial_velocity(spec: str, grid: StaggeredGrid, base: Optional[Path] = None) -> VelocityField:
    spec = spec.strip()
    kind, _, arg = spec.partition(":")
    lo = np.array(grid.lo)
    ext = grid.extent
    if kind == "zero":
        return VelocityField.zeros(grid)
    if kind == "vortex":
        amp = float(arg or 0.05)
        return VelocityField.from_function(grid, lambda x: _named_vortex(x, lo, ext, amp, grid.d))
    if kind == "taylor_green":
        if grid.d != 2:
            raise ConfigError("taylor_green initial field is 2-D only")
        amp = float(arg or 1.0)
        return VelocityField.from_function(
            grid, lambda x: amp * np.stack([np.sin(x[..., 0]) * np.cos(x[..., 1]), -np.cos(x[..., 0]) * np.sin(x[..., 1])], -1)
        )
    if kind == "file":
        path = Path(arg)
        if not path.is_absolute() and base is not None:
            path = base / path
        return read_snapshot_bin(path, grid)
    raise ConfigError(f"unknown initial field {spec!r}")


def load_config(path, overrides: Optional[list] = None) -> SimulationConfig:
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return parse_config(text, overrides, path)


def parse_config(text: str, overrides: Optional[list] = None, path: Optional[str] = None) -> SimulationConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str.lower
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None))
    lines = _line_index(text)
    lines = {(s, k.lower() if k else k): v for (s, k), v in lines.items()}
    for sec, vals in DEFAULTS.items():
        if not cp.has_section(sec):
            cp.add_section(sec)
        for k, v in vals.items():
            if not cp.has_option(sec, k.lower()):
                cp.set(sec, k.lower(), v)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        sec, dot, opt = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp.set(sec, opt.lower(), value.strip())

    def get(sec, key, required=False):
        k = key.lower()
        if not cp.has_option(sec, k):
            if required:
                raise ConfigError(f"missing required key [{sec}] {key}", lines.get((sec, None)))
            return None
        return cp.get(sec, k)

    def line(sec, key):
        return lines.get((sec, key.lower()))

    def num(sec, key, cast=float, positive=True):
        raw = get(sec, key, required=True)
        try:
            val = cast(raw)
        except ValueError:
            raise ConfigError(f"[{sec}] {key}: not a number: {raw!r}", line(sec, key))
        if positive and not val > 0:
            raise ConfigError(f"[{sec}] {key} must be positive, got {raw}", line(sec, key))
        return val

    lo = _floats(get("domain", "lo", True), what="[domain] lo", line=line("domain", "lo"))
    d = len(lo)
    if d not in (2, 3):
        raise ConfigError(f"[domain] lo: dimension must be 2 or 3, got {d}", line("domain", "lo"))
    hi = _floats(get("domain", "hi", True), d, "[domain] hi", line("domain", "hi"))
    res = get("domain", "resolution", True)
    shape_res = [int(x) for x in _floats(res, what="[domain] resolution", line=line("domain", "resolution"))]
    if len(shape_res) == 1:
        shape_res = shape_res * d
    if len(shape_res) != d:
        raise ConfigError(f"[domain] resolution: expected {d} values", line("domain", "resolution"))
    nu = num("domain", "nu")
    try:
        grid = StaggeredGrid(lo, hi, shape_res, nu)
    except SwimfluidError as exc:
        raise ConfigError(f"[domain] {exc}", line("domain", "resolution"))
    if d == 3 and max(shape_res) > 64:
        raise ConfigError("[domain] 3-D runs are capped at 64 cells per axis", line("domain", "resolution"))

    shape = parse_shape(get("swimmer", "shape"), line("swimmer", "shape"))
    if shape.d != d:
        raise ConfigError(f"[swimmer] shape is {shape.d}-D but the domain is {d}-D", line("swimmer", "shape"))
    pos_text = get("swimmer", "positions", True)
    rows = [r for r in pos_text.replace("\n", ";").split(";") if r.strip()]
    positions = np.array([_floats(r, d, "[swimmer] positions", line("swimmer", "positions")) for r in rows])
    if "n" in cp["swimmer"] and int(cp.get("swimmer", "n")) != len(positions):
        raise ConfigError(f"[swimmer] N={cp.get('swimmer', 'n')} but {len(positions)} positions given", line("swimmer", "n"))
    if len(positions) < 2:
        raise ConfigError("[swimmer] at least two bodies are required", line("swimmer", "positions"))
    verdict = geometry_guard(positions, shape, grid)
    if not verdict:
        raise ConfigError(f"(body1) violated at t=0: {verdict.detail}", line("swimmer", "positions"))
    ks = num("swimmer", "ks")
    h0 = float(get("swimmer", "h0")) if get("swimmer", "h0") else None

    T = num("time", "T")
    ts_raw = get("time", "T_star")
    T_star = None if ts_raw.strip() == "auto" else num("time", "T_star")
    dt_raw = get("time", "dt")
    dt = None if dt_raw.strip() == "auto" else num("time", "dt")
    cfl = num("time", "cfl")
    if T_star is not None and T_star > T:
        raise ConfigError(f"[time] T_star={T_star} exceeds T={T}", line("time", "T_star"))

    n = len(positions)
    variant = get("forces", "variant").strip()
    if variant not in ELASTIC_VARIANTS:
        raise ConfigError(f"[forces] variant must be one of {ELASTIC_VARIANTS}", line("forces", "variant"))
    rot3d = get("forces", "rot3d").strip()
    if rot3d not in ROT3D_VARIANTS:
        raise ConfigError(f"[forces] rot3d must be one of {ROT3D_VARIANTS}", line("forces", "rot3d"))
    rl_raw = get("forces", "rest_lengths")
    if rl_raw is None:
        rest = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    else:
        rest = np.array(_floats(rl_raw, what="[forces] rest_lengths", line=line("forces", "rest_lengths")))
        if rest.size == 1:
            rest = np.full(n - 1, rest[0])
    kappa = [parse_schedule_value(get("forces", f"kappa_{i}") or "0", T, line("forces", f"kappa_{i}")) for i in range(1, n)]
    v = [parse_schedule_value(get("forces", f"v_{i}") or "0", T, line("forces", f"v_{i}")) for i in range(1, n - 1)]
    try:
        schedule = ForceSchedule(rest, kappa, v, variant, rot3d)
    except SwimfluidError as exc:
        raise ConfigError(f"[forces] {exc}", lines.get(("forces", None)))

    tol = num("solver", "tol")
    max_iter = num("solver", "max_iter", int)
    mode = get("solver", "mode").strip()
    if mode not in ("interval", "per_step"):
        raise ConfigError("[solver] mode must be interval or per_step", line("solver", "mode"))
    c0 = num("solver", "c0")
    safety = num("solver", "safety")
    snapshot_every = num("output", "snapshot_every", int, positive=False)
    fmt = get("output", "format").strip()
    if fmt not in ("bin", "csv"):
        raise ConfigError("[output] format must be bin or csv", line("output", "format"))
    seed = num("probe", "seed", int, positive=False)
    cfg = SimulationConfig(
        grid, shape, positions, get("initial", "u0"), schedule, T, T_star, dt, cfl, tol, max_iter, mode, c0, safety,
        ks, h0, snapshot_every, fmt, seed, num("probe", "pairs", int), num("probe", "fields", int),
        num("probe", "directions", int),
        {"eta": get("h2", "eta").strip(), "h_samples": num("h2", "h_samples", int), "y_resolution": num("h2", "y_resolution", int),
         "claimed_ks": get("h2", "claimed_ks")},
        path,
    )
    try:
        u0 = cfg.initial_velocity()
    except (OSError, ValueError, SwimfluidError) as exc:
        raise ConfigError(f"[initial] u0: {exc}", line("initial", "u0"))
    if relative_divergence(u0) > 1e-10:
        cfg.warnings.append("initial velocity is not discretely divergence-free; it is projected on ingest")
    cfg.echo = {f"{s}.{k}": cp.get(s, k) for s in cp.sections() for k in cp[s]}
    return cfg


def with_seed(cfg: SimulationConfig, seed: Optional[int]) -> SimulationConfig:
    if seed is not None:
        cfg.seed = int(seed)
    return cfg
