import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swimfluid.errors import GeometryViolation, ParameterError
from swimfluid.fluid import StaggeredGrid
from swimfluid.geometry import (
    NodalField,
    ShapeSpec,
    estimate_KS,
    eta_along_h,
    random_bandlimited_field,
    rasterize_indicator,
    section_of_field,
    sym_diff_section_measure,
    verify_section_inequalities,
)


# -- shapes -------------------------------------------------------------------


def test_sawtooth_measure_matches_triangle_sum():
    s = ShapeSpec.sawtooth(1.0, 12)
    tri = 0.25 + sum(0.5 * 4.0**-m for m in range(1, 13))
    assert s.measure == pytest.approx(tri, rel=1e-14)
    assert s.truncation_error == pytest.approx(4.0**-12 / 6)


def test_sawtooth_centroid_by_sampling():
    s = ShapeSpec.sawtooth(1.0, 12)
    # Monte Carlo-free check: dense grid centroid of the raw set
    x = np.linspace(0, 1, 1601)[:-1] + 1 / 3200
    y = np.linspace(-0.5, 0.5, 1601)[:-1] + 1 / 3200
    X, Y = np.meshgrid(x, y, indexing="ij")
    pts = np.stack([X, Y], -1) - s.centroid_offset
    inside = s.contains(pts)
    c = np.array([X[inside].mean(), Y[inside].mean()])
    assert np.allclose(c, s.centroid_offset, atol=2e-3)


def test_sawtooth_bounding_ball_contains_set():
    s = ShapeSpec.sawtooth(1.0, 6)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (20000, 2))
    inside = s.contains(pts)
    assert np.linalg.norm(pts[inside], axis=1).max() <= s.bounding_radius


@pytest.mark.parametrize("bad", [("disc", (-1,)), ("rectangle", (1,)), ("blob", (1,))])
def test_invalid_shapes_rejected(bad):
    with pytest.raises(ParameterError):
        ShapeSpec(*bad)


# -- rasterization ------------------------------------------------------------


def test_rectangle_rasterizes_exactly():
    g = StaggeredGrid((0, 0), (1, 1), (16, 16), 1.0)
    ind = rasterize_indicator(ShapeSpec.rectangle(0.25, 0.25), (0.5, 0.5), g)
    assert ind.discrete_measure == 0.25


def test_disc_rasterization_within_one_percent():
    g = StaggeredGrid((0, 0), (1, 1), (512, 512), 1.0)
    ind = rasterize_indicator(ShapeSpec.disc(0.1), (0.5, 0.5), g)
    assert ind.discrete_measure == pytest.approx(math.pi * 0.01, rel=0.01)


def test_sawtooth_rasterization_within_one_percent():
    s = ShapeSpec.sawtooth(1.0, 12)
    g = StaggeredGrid((-1, -1), (2, 1), (512, 512), 1.0)
    ind = rasterize_indicator(s, (0.5, 0.0), g)
    assert ind.discrete_measure == pytest.approx(0.25 + 1 / 6, rel=0.01)


def test_disc_rasterization_converges_first_order():
    shape = ShapeSpec.disc(0.1)
    exact = shape.measure
    errs = []
    for n in (64, 128, 256, 512):
        g = StaggeredGrid((0, 0), (1, 1), (n, n), 1.0)
        errs.append(np.mean([abs(rasterize_indicator(shape, c, g).discrete_measure - exact)
                             for c in [(0.5, 0.5), (0.4313, 0.5521), (0.6071, 0.3919)]]))
    # error falls like h or faster over the sweep
    assert errs[-1] <= errs[0] / 8 * 1.5


def test_rasterize_rejects_escaping_body():
    g = StaggeredGrid((0, 0), (1, 1), (32, 32), 1.0)
    with pytest.raises(GeometryViolation) as exc:
        rasterize_indicator(ShapeSpec.disc(0.1), (0.05, 0.5), g, body=3)
    assert exc.value.body == 3


# -- section measures ----------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(
    r=st.floats(0.05, 1.0),
    angle=st.floats(0, 2 * math.pi),
    frac=st.floats(0.01, 0.9),
    yoff=st.floats(-1.2, 1.2),
)
def test_disc_sections_obey_two_interval_bound(r, angle, frac, yoff):
    shape = ShapeSpec.disc(r)
    h = frac * r * np.array([math.cos(angle), math.sin(angle)])
    eta = eta_along_h(h)
    y = yoff * r * np.array([-eta[1], eta[0]])
    meas = sym_diff_section_measure(shape, h, eta, y)
    assert meas <= 2 * np.linalg.norm(h) * (1 + 1e-9)


def test_disc_diameter_section_is_twice_shift():
    shape = ShapeSpec.disc(0.3)
    h = np.array([0.03, 0.04])
    assert sym_diff_section_measure(shape, h, eta_along_h(h), np.zeros(2)) == pytest.approx(0.1, rel=1e-9)


def test_zero_shift_and_far_line_give_zero():
    shape = ShapeSpec.disc(0.3)
    assert sym_diff_section_measure(shape, np.zeros(2), [1.0, 0.0], np.zeros(2)) == 0.0
    assert sym_diff_section_measure(shape, [0.01, 0], [1.0, 0.0], [0.0, 5.0]) == 0.0


def test_non_unit_direction_rejected():
    with pytest.raises(ParameterError):
        sym_diff_section_measure(ShapeSpec.disc(1), [0.1, 0], [2.0, 0.0], [0, 0])


@pytest.mark.parametrize("shape", [ShapeSpec.disc(0.2), ShapeSpec.rectangle(0.2, 0.1), ShapeSpec.sawtooth(1.0, 8)])
def test_translation_invariance_with_reflected_offset(shape):
    rng = np.random.default_rng(5)
    for _ in range(10):
        h = rng.uniform(-0.05, 0.05, 2)
        eta = rng.standard_normal(2)
        eta /= np.linalg.norm(eta)
        y = rng.uniform(-0.3, 0.3, 2)
        a = sym_diff_section_measure(shape, h, eta, y)
        b = sym_diff_section_measure(shape, -h, eta, y - h)
        assert a == pytest.approx(b, abs=1e-10)


def test_sawtooth_vertical_sections_bounded_by_four_kappa_eps():
    s = ShapeSpec.sawtooth(1.0, 12)
    eta = np.array([0.0, 1.0])
    for eps in (2.0**-3, 2.0**-5):
        h = eps * np.array([-1.0, 0.0])
        for x in np.linspace(-0.7, 0.7, 41):
            assert sym_diff_section_measure(s, h, eta, [x, 0.0]) <= 4 * eps * (1 + 1e-9)


def test_sawtooth_horizontal_section_exceeds_linear_bound():
    s = ShapeSpec.sawtooth(1.0, 12)
    m = 6
    h = 2.0**-m * np.array([-1.0, 0.0])
    y = np.array([0.0, 2.0**-m]) - s.centroid_offset
    assert sym_diff_section_measure(s, h, eta_along_h(h), y) >= 2 * (m - 1) * 2.0**-m * 0.98


def test_estimate_ks_disc_and_rectangle():
    hs = [0.01 * np.array([math.cos(a), math.sin(a)]) for a in np.linspace(0, 3, 6)]
    rep = estimate_KS(ShapeSpec.disc(0.1), "along_h", hs, 21)
    assert 1.95 <= rep.ks_estimate <= 2.05
    hs = [np.array([0.01, 0]), np.array([0, -0.02])]
    rep = estimate_KS(ShapeSpec.rectangle(0.1, 0.05), "along_h", hs, 21)
    assert rep.ks_estimate == pytest.approx(2.0, rel=1e-6)
    assert rep.witness is not None and rep.n_samples == 42


def test_estimate_ks_sawtooth_fixed_direction():
    s = ShapeSpec.sawtooth(1.0, 10)
    hs = [eps * np.array([-1.0, 0.0]) for eps in (0.25, 0.1, 0.03)]
    rep = estimate_KS(s, "fixed:0,1", hs, 41, claimed_ks=4.0)
    assert rep.ks_estimate <= 4.0
    assert rep.all_pass


def test_estimate_ks_monotone_under_refinement():
    s = ShapeSpec.sawtooth(1.0, 8)
    hs = [2.0**-4 * np.array([-1.0, 0.0])]
    vals = [estimate_KS(s, "along_h", hs, n).ks_estimate for n in (5, 9, 17, 33)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_estimate_ks_rejects_bad_shifts():
    with pytest.raises(ParameterError):
        estimate_KS(ShapeSpec.disc(0.1), "along_h", [], 5)
    with pytest.raises(ParameterError):
        estimate_KS(ShapeSpec.disc(0.1), "along_h", [np.array([1.0, 0.0])], 5)


# -- sections of fields -----------------------------------------------------------


def test_section_of_zero_field():
    w = NodalField.from_function((0, 0), (1, 1), (32, 32), lambda p: np.zeros(p.shape[:-1]))
    t, g = section_of_field(w, [1.0, 0.0], [0.0, 0.4])
    assert t.size > 0 and np.all(g == 0)


def test_section_of_separable_field():
    gfun = lambda x: np.sin(np.pi * x) * (1 + x)
    w = NodalField.from_function((0, 0), (1, 1), (128, 128), lambda p: gfun(p[..., 0]) * gfun(p[..., 1]))
    t, g = section_of_field(w, [1.0, 0.0], [0.0, 0.3])
    assert np.abs(g - gfun(t) * gfun(0.3)).max() < 1e-3


def test_section_of_bump_matches_direct_evaluation():
    bump = lambda p: np.exp(-20 * ((p[..., 0] - 0.4) ** 2 + (p[..., 1] - 0.55) ** 2)) * np.sin(np.pi * p[..., 0]) * np.sin(np.pi * p[..., 1])
    errs = []
    nu = np.array([0.6, 0.8])
    y = np.array([0.5, 0.5]) - 0.5 * nu
    for n in (32, 64):
        w = NodalField.from_function((0, 0), (1, 1), (n, n), bump)
        t, g = section_of_field(w, nu, y)
        errs.append(np.abs(g - bump(y + t[:, None] * nu)).max())
    h = 1 / 32
    assert errs[0] <= 40 * h * h  # second derivatives of the bump are below ~80
    assert errs[1] < errs[0] / 3


def test_section_outside_domain_is_empty():
    w = NodalField.from_function((0, 0), (1, 1), (16, 16), lambda p: p[..., 0])
    t, g = section_of_field(w, [1.0, 0.0], [0.0, 2.0])
    assert t.size == 0 and g.size == 0


def test_section_inequalities_zero_field():
    w = NodalField.from_function((0, 0), (1, 1), (32, 32), lambda p: np.zeros(p.shape[:-1]))
    rep = verify_section_inequalities(w, [[1.0, 0.0]])
    assert rep.worst_ratio_i == 0 and rep.worst_ratio_ii == 0


def test_section_inequalities_sine_mode():
    w = NodalField.from_function((0, 0), (1, 1), (128, 128), lambda p: np.sin(np.pi * p[..., 0]) * np.sin(np.pi * p[..., 1]))
    rep = verify_section_inequalities(w, [[1.0, 0.0]])
    assert rep.worst_ratio_i < 1.0
    assert rep.holds


def test_section_inequalities_random_fields(rng):
    for _ in range(3):
        w = random_bandlimited_field(rng, (0, 0), (1, 1), (48, 48))
        rep = verify_section_inequalities(w, rng.standard_normal((3, 2)))
        assert rep.holds
