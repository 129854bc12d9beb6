import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from swimfluid.errors import BodyCollisionError, DegenerateLinkError, DimensionError, ParameterError
from swimfluid.fluid import StaggeredGrid
from swimfluid.forces import (
    ForceSchedule,
    ScheduleTable,
    assemble_force_field,
    body_forces,
    body_integral,
    elastic_forces,
    rot_forces_2d,
    rot_forces_3d,
    rot_operators_3d,
    spread_forces,
    verify_force_bounds,
)
from swimfluid.geometry import ShapeSpec
from swimfluid.swimmer import rasterize_bodies

coords = st.floats(-2.0, 2.0, allow_nan=False)


def spread_positions(n, d):
    return arrays(np.float64, (n, d), elements=coords).filter(
        lambda z: np.min(np.linalg.norm(np.diff(z, axis=0), axis=-1)) > 1e-3
    )


# -- schedules --------------------------------------------------------------------


def test_schedule_table_lookup_and_norm():
    tb = ScheduleTable.parse("0:2.0, 0.5:1.0")
    assert tb(0.0) == 2.0 and tb(0.49) == 2.0 and tb(0.5) == 1.0 and tb(7.0) == 1.0
    assert tb.l2_norm(1.0) == pytest.approx(math.sqrt(4 * 0.5 + 1 * 0.5))
    assert tb.time_to_l2(math.sqrt(2.0)) == pytest.approx(0.5)
    assert tb.time_to_l2(math.sqrt(2.5)) == pytest.approx(1.0)


def test_square_wave_schedule():
    tb = ScheduleTable.square(2.0, 0.4, 1.0)
    assert tb(0.1) == 2.0 and tb(0.3) == -2.0 and tb(0.5) == 2.0
    assert tb.l2_norm(1.0) == pytest.approx(2.0)


def test_schedule_validation():
    with pytest.raises(ParameterError):
        ScheduleTable([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(ParameterError):
        ForceSchedule([1.0], [-1.0], [])
    ForceSchedule([1.0], [-1.0], [], variant="colinear")
    with pytest.raises(ParameterError):
        ForceSchedule([1.0, 1.0], [1.0], [0.0])
    with pytest.raises(ParameterError):
        ForceSchedule([1.0, 1.0], [1.0, 1.0], [])


def test_gamma_and_inverse():
    s = ForceSchedule([1.0, 1.0], [ScheduleTable.parse("0:2, 1:0"), 1.0], [3.0])
    assert s.gamma(1.0) == pytest.approx(3.0)
    assert s.gamma(s.gamma_inverse(1.5)) == pytest.approx(1.5)


# -- elastic -------------------------------------------------------------------------


def test_elastic_rest_configuration_is_force_free():
    s = ForceSchedule([0.3, 0.4], [2.0, 5.0], [0.0])
    z = np.array([[0.0, 0.0], [0.3, 0.0], [0.3, 0.4]])
    assert np.all(elastic_forces(z, s, 0.0).elastic == 0)


def test_elastic_pair_example():
    s = ForceSchedule([1.0], [1.0], [])
    f = elastic_forces(np.array([[0.0, 0.0], [2.0, 0.0]]), s, 0.0).elastic
    assert np.allclose(f, [[1.0, 0.0], [-1.0, 0.0]], atol=0, rtol=0)


def test_colinear_variant():
    s = ForceSchedule([1.0], [-2.0], [], variant="colinear")
    f = elastic_forces(np.array([[0.0, 0.0], [0.5, 1.0]]), s, 0.0).elastic
    assert np.allclose(f, [[-1.0, -2.0], [1.0, 2.0]])


def test_degenerate_link_raises():
    s = ForceSchedule([1.0], [1.0], [])
    with pytest.raises(DegenerateLinkError) as exc:
        elastic_forces(np.array([[0.1, 0.1], [0.1, 0.1]]), s, 0.0)
    assert exc.value.link == 0


def test_body_count_mismatch():
    with pytest.raises(DimensionError):
        elastic_forces(np.zeros((3, 2)) + np.arange(3)[:, None], ForceSchedule([1.0], [1.0], []), 0.0)


@settings(max_examples=60, deadline=None)
@given(z=spread_positions(4, 2), k=st.lists(st.floats(0, 10), min_size=3, max_size=3))
def test_elastic_sum_vanishes(z, k):
    s = ForceSchedule([0.5, 0.7, 0.2], k, [0.0, 0.0])
    f = elastic_forces(z, s, 0.0).elastic
    assert np.all(np.abs(f.sum(axis=0)) <= 1e-14 * max(1.0, np.abs(f).max()))


# -- rotational ------------------------------------------------------------------------


def test_rot2d_hand_example():
    s = ForceSchedule([1.0, 1.0], [0.0, 0.0], [1.0])
    z = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    bf = rot_forces_2d(z, s, 0.0)
    assert np.array_equal(bf.rotational, [[0.0, 1.0], [0.0, -2.0], [0.0, 1.0]])
    assert bf.net_torque(z) == 0.0


def test_rot2d_zero_control():
    s = ForceSchedule([1.0, 1.0], [0.0, 0.0], [0.0])
    assert np.all(rot_forces_2d(np.array([[0.0, 0], [1, 0.2], [2, 0]]), s, 0.0).rotational == 0)


@settings(max_examples=60, deadline=None)
@given(z=spread_positions(5, 2), v=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       ref=arrays(np.float64, 2, elements=coords))
def test_rot2d_sum_and_torque_vanish(z, v, ref):
    s = ForceSchedule([1.0] * 4, [0.0] * 4, v)
    bf = rot_forces_2d(z, s, 0.0)
    scale = max(1.0, np.abs(bf.rotational).max() * (1 + np.abs(z).max() + np.abs(ref).max()))
    assert np.all(np.abs(bf.net_force()) <= 1e-13 * scale)
    assert abs(bf.net_torque(z, about=ref, part="rotational")) <= 1e-13 * scale


def test_rot3d_collinear_triplet_is_exactly_zero():
    s = ForceSchedule([1.0, 1.0], [0.0, 0.0], [3.7])
    # dyadic coordinates so the triplet is collinear in floating point too
    z = np.array([[0.25, 0.375, 0.5], [0.5, 0.5, 0.5], [1.0, 0.75, 0.5]])
    assert np.all(rot_forces_3d(z, s, 0.0).rotational == 0.0)


def test_rot3d_right_angle_example():
    s = ForceSchedule([1.0, 1.0], [0.0, 0.0], [1.0])
    z = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    f = rot_forces_3d(z, s, 0.0).rotational
    assert np.array_equal(f[0], [0.0, 1.0, 0.0])
    assert np.array_equal(f.sum(axis=0), [0.0, 0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(z=spread_positions(3, 3), x=arrays(np.float64, 3, elements=coords))
def test_rot3d_operators_antisymmetric_pair(z, x):
    P, Q = rot_operators_3d(z, 1)
    assert np.allclose(P @ x, -(Q @ x), atol=1e-14, rtol=0)
    xi = np.linalg.norm(np.cross(z[0] - z[1], z[2] - z[1]))
    assert np.linalg.norm(P @ x) <= xi * np.linalg.norm(x) * (1 + 1e-12) + 1e-14
    assert xi <= np.linalg.norm(z[1] - z[0]) * np.linalg.norm(z[1] - z[2]) * (1 + 1e-12)


@settings(max_examples=40, deadline=None)
@given(z=spread_positions(4, 3), v=st.lists(st.floats(-5, 5), min_size=2, max_size=2),
       ref=arrays(np.float64, 3, elements=coords))
def test_rot3d_balanced_sum_and_torque_vanish(z, v, ref):
    s = ForceSchedule([1.0] * 3, [0.0] * 3, v)
    bf = rot_forces_3d(z, s, 0.0)
    scale = max(1.0, np.abs(bf.rotational).max() * (1 + np.abs(z).max() + np.abs(ref).max()))
    assert np.all(np.abs(bf.net_force()) <= 1e-13 * scale)
    assert np.all(np.abs(bf.net_torque(z, about=ref, part="rotational")) <= 1e-13 * scale)


def test_rot3d_literal_variant_has_net_torque():
    s = ForceSchedule([1.0, 1.0], [0.0, 0.0], [1.0], rot3d="literal")
    z = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    bf = rot_forces_3d(z, s, 0.0)
    assert np.allclose(bf.net_force(), 0)
    assert np.linalg.norm(bf.net_torque(z)) > 0.5


def test_rot_dimension_checks():
    s = ForceSchedule([1.0, 1.0], [0.0, 0.0], [1.0])
    with pytest.raises(DimensionError):
        rot_forces_2d(np.zeros((3, 3)) + np.arange(3)[:, None], s, 0.0)
    with pytest.raises(DimensionError):
        rot_forces_3d(np.zeros((3, 2)) + np.arange(3)[:, None], s, 0.0)


def test_force_continuity_in_positions():
    s = ForceSchedule([0.3, 0.3], [2.0, 1.0], [1.5])
    z = np.array([[0.2, 0.5], [0.5, 0.55], [0.8, 0.45]])
    d = np.random.default_rng(3).standard_normal(z.shape)
    diffs = [np.linalg.norm(body_forces(z + e * d, s, 0).total - body_forces(z, s, 0).total) for e in (1e-4, 2e-4, 4e-4)]
    assert diffs[1] / diffs[0] == pytest.approx(2.0, rel=0.01)
    assert diffs[2] / diffs[1] == pytest.approx(2.0, rel=0.01)


# -- assembly -----------------------------------------------------------------------


@pytest.fixture
def assembly_setup():
    g = StaggeredGrid((0, 0), (1, 1), (64, 64), 0.1)
    shape = ShapeSpec.disc(0.05)
    return g, shape


def test_zero_schedule_assembles_zero_field(assembly_setup):
    g, shape = assembly_setup
    z = np.array([[0.3, 0.5], [0.5, 0.5], [0.7, 0.5]])
    f = assemble_force_field(z, ForceSchedule.zero(3), 0.0, g, rasterize_bodies(z, shape, g), shape.measure)
    assert f.abs_total() == 0


def test_pair_integral_matches_body_force(assembly_setup):
    g, shape = assembly_setup
    z = np.array([[0.3137, 0.5], [0.7, 0.5211]])
    s = ForceSchedule([0.2], [1.0], [])
    inds = rasterize_bodies(z, shape, g)
    f = assemble_force_field(z, s, 0.0, g, inds, shape.measure)
    F = elastic_forces(z, s, 0.0).elastic
    for i in range(2):
        assert np.allclose(body_integral(f, inds[i]), F[i] * shape.measure, rtol=1e-12, atol=1e-15)
    assert np.all(np.abs(f.total()) <= 1e-12 * f.abs_total())


def test_grid_sum_vanishes_for_mixed_forces(assembly_setup):
    g, shape = assembly_setup
    rng = np.random.default_rng(9)
    s = ForceSchedule([0.15, 0.2, 0.15], [3.0, 1.0, 2.0], [2.0, -1.0])
    for _ in range(10):
        z = np.array([[0.2, 0.5], [0.4, 0.5], [0.6, 0.5], [0.8, 0.5]]) + rng.uniform(-0.03, 0.03, (4, 2))
        f = assemble_force_field(z, s, 0.0, g, rasterize_bodies(z, shape, g), shape.measure)
        assert np.all(np.abs(f.total()) <= 1e-12 * f.abs_total())


def test_overlapping_bodies_rejected(assembly_setup):
    g, shape = assembly_setup
    z = np.array([[0.5, 0.5], [0.55, 0.5]])
    with pytest.raises(BodyCollisionError):
        spread_forces(np.ones((2, 2)), g, rasterize_bodies(z, shape, g), shape.measure)


# -- norm bounds ---------------------------------------------------------------------


def test_bounds_zero_schedule():
    z = np.array([[[0.3, 0.5], [0.5, 0.5], [0.7, 0.5]]] * 3)
    rep = verify_force_bounds([0, 0.05, 0.1], z, ForceSchedule.zero(3), 0.1, 1.0, 0.05, 0.01)
    assert rep.holds and rep.lhs == {"el": 0.0, "rot": 0.0} and rep.rhs["el"] == 0.0


def test_bounds_two_body_elastic_run():
    times = np.linspace(0, 0.1, 11)
    z = np.stack([np.array([[0.3, 0.5], [0.6 + 0.1 * t, 0.5]]) for t in times])
    s = ForceSchedule([0.2], [4.0], [])
    rep = verify_force_bounds(times, z, s, 0.1, 1.0, 0.05, math.pi * 0.05**2)
    assert rep.holds and rep.slack["el"] > 0


def test_bounds_inapplicable_when_bodies_close():
    z = np.array([[[0.3, 0.5], [0.35, 0.5]]] * 2)
    rep = verify_force_bounds([0, 0.1], z, ForceSchedule([0.2], [1.0], []), 0.1, 1.0, 0.05, 0.01)
    assert not rep.applicable and not rep.holds


@pytest.mark.parametrize("d", [2, 3])
def test_bounds_random_trajectories(d):
    rng = np.random.default_rng(42 + d)
    r = 0.03
    m = math.pi * r * r if d == 2 else 4 / 3 * math.pi * r**3
    for _ in range(100):
        n = rng.integers(2, 5)
        s = ForceSchedule(rng.uniform(0.05, 0.3, n - 1),
                          [ScheduleTable([0, 0.05], rng.uniform(0, 5, 2)) for _ in range(n - 1)],
                          [ScheduleTable([0, 0.05], rng.uniform(-5, 5, 2)) for _ in range(n - 2)])
        base = rng.uniform(0.2, 0.8, (n, d))
        if np.min([np.linalg.norm(base[i] - base[j]) for i in range(n) for j in range(i)]) < 3 * r:
            continue
        times = np.linspace(0, 0.1, 6)
        drift = rng.uniform(-0.05, 0.05, (n, d))
        z = np.stack([base + t * drift for t in times])
        rep = verify_force_bounds(times, z, s, 0.1, 1.0, r, m)
        assert rep.holds
