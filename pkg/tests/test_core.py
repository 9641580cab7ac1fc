import math

import numpy as np
import pytest

from binmatch.core import (
    Direction,
    DirectionGrid,
    FreqGrid,
    NonHermitianError,
    SingularMatrixError,
    angular_distance_deg,
    hermitian_solve_general,
    solve_regularized,
)


def random_hermitian_psd(rng, n):
    b = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return b @ b.conj().T


class TestDirection:
    def test_azimuth_wraps(self):
        d = Direction(2.5 * math.pi)
        assert abs(d.azimuth - 0.5 * math.pi) < 1e-12

    def test_negative_azimuth_wraps(self):
        d = Direction.from_degrees(-90.0)
        assert abs(d.azimuth_deg - 270.0) < 1e-9

    def test_unit_vector_recoverable(self):
        d = Direction.from_degrees(30.0, 10.0)
        u = d.unit_vector()
        assert abs(np.linalg.norm(u) - 1.0) < 1e-12
        az = math.degrees(math.atan2(u[1], u[0]))
        el = math.degrees(math.asin(u[2]))
        assert abs(az - 30.0) < 1e-9
        assert abs(el - 10.0) < 1e-9

    def test_elevation_bounds(self):
        with pytest.raises(ValueError):
            Direction(0.0, 2.0)

    def test_isclose_tolerance(self):
        a = Direction(1.0)
        b = Direction(1.0 + 5e-10)
        assert a.isclose(b)
        assert not a.isclose(Direction(1.0 + 1e-6))


class TestDirectionGrid:
    def test_ring_count_and_order(self):
        g = DirectionGrid.azimuth_ring(60)
        assert len(g) == 60
        assert np.allclose(g.azimuths_deg, np.arange(60) * 6.0)

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            DirectionGrid([Direction(0.0), Direction(0.0)])

    def test_index_of(self):
        g = DirectionGrid.azimuth_ring(60)
        assert g.index_of(Direction.from_degrees(42.0)) == 7
        with pytest.raises(ValueError):
            g.index_of(Direction.from_degrees(43.0))

    def test_index_nearest(self):
        g = DirectionGrid.azimuth_ring(60)
        assert g.index_nearest(Direction.from_degrees(41.0)) == 7


class TestFreqGrid:
    def test_bin_frequencies(self):
        fg = FreqGrid(48000.0, 1024)
        assert fg.num_bins == 513
        assert fg.bins[0] == 0.0
        assert abs(fg.bins[1] - 46.875) < 1e-12
        assert abs(fg.bins[-1] - 24000.0) < 1e-9
        assert np.all(np.diff(fg.bins) > 0)

    def test_band_mask(self):
        fg = FreqGrid(48000.0, 1024)
        m = fg.band_mask(200.0, 1500.0)
        assert fg.bins[m].min() >= 200.0
        assert fg.bins[m].max() <= 1500.0


class TestSolveRegularized:
    def test_identity_case(self):
        eye = np.eye(2, dtype=complex)
        out = solve_regularized(eye, eye, 0.0)
        assert np.allclose(out, eye, atol=1e-14)

    def test_scalar_inverse(self):
        out = solve_regularized(np.zeros((2, 2)), np.eye(2), 0.5)
        assert np.allclose(out, 2.0 * np.eye(2), atol=1e-14)

    def test_residual_oracle_random_psd(self):
        # independent check: the returned x must satisfy the defining system
        rng = np.random.default_rng(7)
        for _ in range(20):
            m = random_hermitian_psd(rng, 4)
            rhs = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
            eps = 1e-3
            x = solve_regularized(m, rhs, eps)
            resid = (m + eps * np.eye(4)) @ x - rhs
            assert np.linalg.norm(resid) < 1e-9 * np.linalg.norm(rhs)

    def test_non_hermitian_rejected(self):
        m = np.array([[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(NonHermitianError):
            solve_regularized(m, np.eye(2), 0.1)

    def test_singular_with_zero_eps(self):
        m = np.zeros((3, 3))
        with pytest.raises(SingularMatrixError):
            solve_regularized(m, np.eye(3), 0.0)

    def test_matches_general_solver(self):
        rng = np.random.default_rng(3)
        m = random_hermitian_psd(rng, 4) + np.eye(4)
        rhs = rng.standard_normal((4, 1))
        a = solve_regularized(m, rhs, 0.0)
        b = hermitian_solve_general(m, rhs)
        assert np.linalg.norm(a - b) < 1e-8 * np.linalg.norm(b)


class TestHermitianSolveGeneral:
    def test_diagonal(self):
        out = hermitian_solve_general(np.diag([2.0, 4.0]), np.array([2.0, 4.0]))
        assert np.allclose(out.ravel(), [1.0, 1.0], atol=1e-14)

    def test_identity_passthrough(self):
        rng = np.random.default_rng(0)
        rhs = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
        out = hermitian_solve_general(np.eye(3), rhs)
        assert np.allclose(out, rhs, atol=1e-14)

    def test_residual_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            m = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
            m += 4.0 * np.eye(4)
            rhs = rng.standard_normal((4, 3))
            x = hermitian_solve_general(m, rhs)
            assert np.linalg.norm(m @ x - rhs) < 1e-9 * np.linalg.norm(rhs)

    def test_singular_raises(self):
        m = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(SingularMatrixError):
            hermitian_solve_general(m, np.eye(2))


def test_angular_distance_wraps():
    assert angular_distance_deg(350.0, 10.0) == pytest.approx(20.0)
    assert angular_distance_deg(0.0, 180.0) == pytest.approx(180.0)
    assert np.allclose(angular_distance_deg(np.array([0.0, 90.0]), 6.0),
                       [6.0, 84.0])
