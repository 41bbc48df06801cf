# tests/test_polytope.py
from __future__ import annotations

import numpy as np
import pytest

from conftest import INTERIOR_POINTS
from gridmin.errors import DimensionMismatchError, InfeasiblePointError
from gridmin.network import PowerNetwork
from gridmin.polytope import INTERIOR_SLACK, SupplyPolytope, build_polytope


@pytest.fixture
def poly(two_ring: PowerNetwork) -> SupplyPolytope:
    return build_polytope(two_ring)


def test_bounds_of_two_ring(poly: SupplyPolytope) -> None:
    np.testing.assert_allclose(poly.b1, [5.0, 30.0, 55.0])
    np.testing.assert_allclose(poly.b2, [25.0, 25.0, 25.0])
    np.testing.assert_array_equal(poly.A1, np.tril(np.ones((3, 3))))


@pytest.mark.parametrize("p", INTERIOR_POINTS + [[19.0, 19.0, 19.0], [25.0, 25.0, 25.0]])
def test_reference_points_are_feasible(poly: SupplyPolytope, p) -> None:
    ok, slacks = poly.contains(p)

    assert ok
    assert slacks.shape == (10,)


def test_infeasible_point_reports_slacks(poly: SupplyPolytope) -> None:
    ok, slacks = poly.contains([0.0, 0.0, 0.0])
    assert not ok

    with pytest.raises(InfeasiblePointError) as excinfo:
        poly.require([0.0, 0.0, 0.0])
    assert min(excinfo.value.slacks) == pytest.approx(-55.0)


def test_dimension_mismatch(poly: SupplyPolytope) -> None:
    with pytest.raises(DimensionMismatchError):
        poly.contains([1.0, 2.0])


def test_project_keeps_feasible_points(poly: SupplyPolytope) -> None:
    p = np.array(INTERIOR_POINTS[0])

    np.testing.assert_array_equal(poly.project(p), p)


def test_project_onto_capacity_corner(poly: SupplyPolytope) -> None:
    np.testing.assert_allclose(poly.project([30.0, 40.0, 26.0]), [25.0, 25.0, 25.0], atol=1e-10)


def test_project_satisfies_variational_inequality(poly: SupplyPolytope, rng) -> None:
    # x = P(y) iff (y - x) . (z - x) <= 0 for every feasible z
    feasible = poly.sample(rng, 200)
    for y in rng.uniform(-20.0, 45.0, size=(25, 3)):
        x = poly.project(y)
        assert poly.contains(x, tol=1e-9)[0]
        assert np.max((feasible - x) @ (y - x)) <= 1e-7


def test_project_one_dimensional(toy_network: PowerNetwork) -> None:
    poly = build_polytope(toy_network)

    assert poly.project([-3.0])[0] == pytest.approx(0.0)
    assert poly.project([12.0])[0] == pytest.approx(10.0)


def test_reference_points(poly: SupplyPolytope) -> None:
    assert poly.contains(poly.proportional_dispatch())[0]

    start = poly.interior_start()
    assert poly.slacks(start).min() > INTERIOR_SLACK

    center, radius = poly.chebyshev_center()
    assert radius > 1.0
    assert poly.slacks(center).min() >= radius - 1e-6


def test_samples_are_feasible(poly: SupplyPolytope, rng) -> None:
    pts = poly.sample(rng, 50)

    assert pts.shape == (50, 3)
    assert all(poly.contains(p)[0] for p in pts)


def test_max_step_to_boundary(poly: SupplyPolytope) -> None:
    p = np.array([20.0, 18.0, 22.0])

    assert poly.max_step_to_boundary(p, [1.0, 0.0, 0.0]) == pytest.approx(5.0)
    # the cumulative demand row sum(p) >= 55 blocks first
    assert poly.max_step_to_boundary(p, [-1.0, 0.0, 0.0]) == pytest.approx(5.0)
    assert poly.max_step_to_boundary(p, [0.0, -1.0, 0.0]) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        poly.max_step_to_boundary(p, [0.0, 0.0, 0.0])


def test_last_supply(poly: SupplyPolytope) -> None:
    assert poly.last_supply([23.0, 19.0, 24.0]) == pytest.approx(14.0)


def test_project_is_idempotent_and_nonexpansive(poly: SupplyPolytope, rng) -> None:
    ys = rng.uniform(-20.0, 45.0, size=(200, 3))
    for a, b in zip(ys[:100], ys[100:]):
        xa, xb = poly.project(a), poly.project(b)
        np.testing.assert_allclose(poly.project(xa), xa, atol=1e-9)
        assert np.linalg.norm(xa - xb) <= np.linalg.norm(a - b) + 1e-9


# ------------------------------------------------------------------ #
# Spare capacity: the last supply node must not turn into a load
# ------------------------------------------------------------------ #
@pytest.fixture
def spare_poly() -> SupplyPolytope:
    net = PowerNetwork.from_arrays(
        edges=[(1, 3), (2, 3)],
        weights=[20.0, 20.0],
        inertias=[1.0, 1.0, 1.0],
        dampings=[1.0, 1.0, 1.0],
        noise=[1.0, 1.0, 1.0],
        p_max=[10.0, 10.0],
        p_demand=[5.0],
        name="spare",
    )
    return build_polytope(net)


def test_last_supply_stays_nonnegative(spare_poly: SupplyPolytope) -> None:
    ok, slacks = spare_poly.contains([8.0])

    assert not ok
    assert slacks[-1] == pytest.approx(-3.0)
    assert spare_poly.contains([5.0])[0]
    assert spare_poly.last_supply([5.0]) == pytest.approx(0.0)


def test_spare_capacity_projection_and_ratio_test(spare_poly: SupplyPolytope, rng) -> None:
    assert spare_poly.project([8.0])[0] == pytest.approx(5.0)
    assert spare_poly.max_step_to_boundary([2.0], [1.0]) == pytest.approx(3.0)
    assert spare_poly.interior_start()[0] < 5.0
    pts = spare_poly.sample(rng, 50)
    assert np.all(pts <= 5.0)
    assert all(spare_poly.last_supply(p) >= 0.0 for p in pts)
