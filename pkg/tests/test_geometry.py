import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nfloc.derivatives import finite_difference
from nfloc.errors import DomainError
from nfloc.geometry import (ArrayGeometry, antenna_position, cartesian_to_polar, distance,
                            polar_jacobian, polar_to_cartesian, project_feasible, rayleigh_distance)

LARGE = ArrayGeometry(45, 45, 0.025, 0.05)


def polar_points():
    return st.tuples(
        st.floats(0.0, 0.99), st.floats(0.0, 2 * np.pi), st.floats(0.1, 100.0)
    ).map(lambda t: np.array([t[0] * np.cos(t[1]), t[0] * np.sin(t[1]), t[2]]))


class TestAntennaPosition:
    def test_centre(self):
        np.testing.assert_array_equal(antenna_position(23, 23, LARGE), [0, 0, 0])

    def test_edge(self):
        np.testing.assert_allclose(antenna_position(1, 23, LARGE), [-0.55, 0, 0], atol=1e-15)

    def test_corner(self):
        np.testing.assert_allclose(antenna_position(45, 45, LARGE), [0.55, 0.55, 0], atol=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            antenna_position(0, 1, LARGE)
        with pytest.raises(ValueError):
            antenna_position(1, 46, LARGE)

    def test_positions_column_major(self):
        g = ArrayGeometry(4, 3, 0.1, 0.2)
        pos = g.positions()
        for j in range(1, 4):
            for i in range(1, 5):
                np.testing.assert_array_equal(pos[g.flat_index(i, j)], antenna_position(i, j, g))
        assert np.all(pos[:, 2] == 0)

    def test_reference_index_odd(self):
        assert LARGE.reference_index == (23, 23)
        np.testing.assert_array_equal(antenna_position(*LARGE.reference_index, LARGE)[:2], [0, 0])

    def test_invalid_geometry(self):
        with pytest.raises(ValueError):
            ArrayGeometry(0, 3, 0.1, 0.2)
        with pytest.raises(ValueError):
            ArrayGeometry(3, 3, -0.1, 0.2)


class TestDistance:
    def test_values(self):
        assert distance([0, 0, 5], [0, 0, 0]) == 5
        assert distance([3, 0, 4], [0, 0, 0]) == 5
        assert distance([1, 2, 3], [1, 2, 3]) == 0

    @given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
    def test_symmetric(self, v):
        assert distance(v[:3], v[3:]) == distance(v[3:], v[:3])


class TestPolar:
    def test_examples(self):
        np.testing.assert_allclose(polar_to_cartesian([0, 0, 7]), [0, 0, 7])
        np.testing.assert_allclose(polar_to_cartesian([0.6, 0, 10]), [6, 0, 8])
        np.testing.assert_allclose(polar_to_cartesian([0.3, -0.4, 2]), [0.6, -0.8, 2 * np.sqrt(0.75)])

    def test_domain(self):
        with pytest.raises(DomainError):
            polar_to_cartesian([0.8, 0.6, 1.0])
        with pytest.raises(DomainError):
            polar_to_cartesian([0.1, 0.1, -1.0])
        with pytest.raises(DomainError):
            cartesian_to_polar([1.0, 0.0, 0.0])

    @given(polar_points())
    def test_round_trip(self, pp):
        back = cartesian_to_polar(polar_to_cartesian(pp))
        np.testing.assert_allclose(back, pp, rtol=1e-12, atol=1e-12)
        assert polar_to_cartesian(pp)[2] > 0

    def test_jacobian_examples(self):
        np.testing.assert_allclose(polar_jacobian([0, 0, 3.0]), np.diag([3.0, 3.0, 1.0]))
        np.testing.assert_allclose(polar_jacobian([0.6, 0, 10])[2], [-7.5, 0, 0.8])

    def test_jacobian_vs_finite_difference(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            rho, phi = rng.uniform(0, 0.95), rng.uniform(0, 2 * np.pi)
            pp = np.array([rho * np.cos(phi), rho * np.sin(phi), rng.uniform(1, 20)])
            fd = finite_difference(polar_to_cartesian, pp, 1e-6)
            T = polar_jacobian(pp)
            assert np.linalg.norm(fd - T) / np.linalg.norm(T) < 1e-6

    def test_project_feasible(self):
        out = project_feasible([[1.0, 1.0, 7.0], [0.1, 0.2, -3.0], [0.1, 0.2, 50.0]], 0.5, 20.0)
        assert out[0, 0] ** 2 + out[0, 1] ** 2 < 1
        np.testing.assert_allclose(out[0, 0], out[0, 1])
        assert out[1, 2] == 0.5
        assert out[2, 2] == 20.0
        np.testing.assert_array_equal(out[2, :2], [0.1, 0.2])


class TestRayleigh:
    def test_large_array(self):
        assert abs(rayleigh_distance(LARGE) - 101.25) / 101.25 < 1e-10

    def test_single_antenna(self):
        assert rayleigh_distance(ArrayGeometry(1, 1, 0.025, 0.05)) == pytest.approx(0.05, rel=1e-12)

    @settings(max_examples=25)
    @given(st.integers(1, 50), st.integers(1, 50), st.floats(1e-3, 1.0))
    def test_quadratic_in_spacing(self, nx, ny, d):
        a = rayleigh_distance(ArrayGeometry(nx, ny, d, 0.05))
        b = rayleigh_distance(ArrayGeometry(nx, ny, 2 * d, 0.05))
        assert b == pytest.approx(4 * a, rel=1e-12)
