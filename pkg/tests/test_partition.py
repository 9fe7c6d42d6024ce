import numpy as np
import pytest

from nfloc.channel import UserChannelParams, channel_coeff, channel_matrix, channel_vector
from nfloc.frontend import random_beamformer
from nfloc.geometry import ArrayGeometry, antenna_position
from nfloc.partition import (build_B, make_partition, normalized_blocks, reconstruct_channel,
                             reference_vector, subarray_block)

from conftest import rel

LAM = 0.05
LARGE = ArrayGeometry(45, 45, 0.025, LAM)


def user(p):
    return UserChannelParams.with_default_gain(p, LAM)


class TestMakePartition:
    def test_large_array(self):
        spec = make_partition(LARGE, 3)
        assert (spec.ns_x, spec.ns_y, spec.n_sub) == (15, 15, 9)
        assert spec.central_subarray == (2, 2)

    def test_reference_indices(self):
        spec = make_partition(LARGE, 3)
        for v in range(1, 4):
            for u in range(1, 4):
                s = (v - 1) * 3 + (u - 1)
                assert tuple(spec.reference_indices[s]) == ((u - 1) * 15 + 8, (v - 1) * 15 + 8)
        # central reference of the central subarray is the array reference antenna
        assert tuple(spec.reference_indices[spec.central_index]) == LARGE.reference_index

    def test_degenerate(self):
        spec = make_partition(LARGE, 45)
        assert spec.n_per_sub == 1
        assert spec.ref_local == 0
        np.testing.assert_array_equal(spec.reference_positions(), LARGE.positions()[spec.antenna_index[:, 0]])

    def test_not_divisible(self):
        with pytest.raises(ValueError):
            make_partition(LARGE, 2)

    def test_layout_round_trip(self, small_spec):
        x = np.arange(small_spec.geometry.n_antennas) * (1 + 1j)
        np.testing.assert_array_equal(small_spec.from_partition_layout(small_spec.to_partition_layout(x)), x)


class TestBlocks:
    def test_reference_element_is_one(self, small_spec):
        for u, v in [(1, 1), (2, 3), (3, 2)]:
            _, D = subarray_block([0.4, 1.0, 5.0], small_spec, u, v)
            i = small_spec.ref_local % small_spec.ns_x
            j = small_spec.ref_local // small_spec.ns_x
            assert D[i, j] == 1.0 + 0j

    def test_reproduces_submatrix(self, small_spec):
        u0 = user([0.4, 1.0, 5.0])
        H = channel_matrix(u0, small_spec.geometry)
        n = small_spec.ns_x
        for u in range(1, 4):
            for v in range(1, 4):
                h_ref, D = subarray_block(u0.position, small_spec, u, v)
                sub = H[(u - 1) * n:u * n, (v - 1) * n:v * n]
                np.testing.assert_allclose(h_ref * D, sub, rtol=1e-14)

    def test_single_antenna_block(self):
        spec = make_partition(ArrayGeometry(3, 3, 0.025, LAM), 3)
        _, D = subarray_block([0.1, 0.2, 2.0], spec, 2, 1)
        np.testing.assert_array_equal(D, [[1.0]])


class TestReferenceVector:
    def test_central_entry(self, small_spec):
        c = reference_vector([1.0, -0.5, 6.0], small_spec)
        assert c[small_spec.central_index] == 1.0

    def test_matches_direct_coefficients(self, small_spec):
        u0 = user([1.0, -0.5, 6.0])
        g = small_spec.geometry
        c = reference_vector(u0.position, small_spec)
        ic, jc = small_spec.reference_indices[small_spec.central_index]
        h_c = channel_coeff(u0, antenna_position(ic, jc, g), LAM)
        for s, (i, j) in enumerate(small_spec.reference_indices):
            direct = channel_coeff(u0, antenna_position(i, j, g), LAM)
            assert abs(h_c * c[s] - direct) <= 1e-14 * abs(direct)

    def test_boresight_mirror(self, small_spec):
        c = reference_vector([0.0, 0.0, 4.0], small_spec)
        np.testing.assert_allclose(c, c[::-1], rtol=1e-12)


class TestMeasurementMatrix:
    def test_shape(self):
        spec = make_partition(LARGE, 3)
        W = random_beamformer(160, LARGE.n_antennas, 0).weights
        B = build_B([[0, 0, 5.0], [1, 1, 6.0], [-1, 0, 7.0]], W, spec)
        assert B.shape == (160, 27)

    def test_signal_identity(self, small_spec):
        rng = np.random.default_rng(4)
        g = small_spec.geometry
        W = random_beamformer(20, g.n_antennas, 2).weights
        for _ in range(10):
            p = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(3, 8)])
            u0 = UserChannelParams.with_default_gain(p, LAM, tx_power_w=rng.uniform(0.5, 2), pilot=np.exp(1j * rng.uniform(0, 6)))
            h = channel_vector(u0, g)
            h_c = h[g.flat_index(*small_spec.reference_indices[small_spec.central_index])]
            rho = u0.amplitude * h_c * reference_vector(p, small_spec)
            B = build_B([p], W, small_spec)
            assert rel(B @ rho, u0.amplitude * (W @ h)) < 1e-12

    def test_single_subarray(self):
        g = ArrayGeometry(5, 5, 0.025, LAM)
        spec = make_partition(g, 1)
        W = random_beamformer(4, 25, 0).weights
        p = [0.3, 0.1, 2.0]
        h = channel_vector(user(p), g)
        B = build_B([p], W, spec)
        np.testing.assert_allclose(B[:, 0], W @ (h / h[spec.antenna_index[0, spec.ref_local]]), rtol=1e-12)

    def test_bad_beamformer(self, small_spec):
        with pytest.raises(ValueError):
            build_B([[0, 0, 5.0]], np.ones((4, 10)), small_spec)

    def test_column_order(self, small_spec):
        W = random_beamformer(8, small_spec.geometry.n_antennas, 0).weights
        P = [[0.5, 0, 5.0], [-1, 1, 6.0]]
        B = build_B(P, W, small_spec)
        Ws = W[:, small_spec.antenna_index]
        for k, p in enumerate(P):
            d = normalized_blocks(p, small_spec)
            for s in range(small_spec.n_sub):
                np.testing.assert_allclose(B[:, k * 9 + s], Ws[:, s, :] @ d[s], rtol=1e-13)


class TestReconstruction:
    def test_identity(self, small_spec):
        u0 = user([-1.0, 2.0, 5.5])
        H = channel_matrix(u0, small_spec.geometry)
        i, j = small_spec.reference_indices[small_spec.central_index]
        H_hat = reconstruct_channel(u0.position, H[i - 1, j - 1], small_spec)
        assert rel(H_hat, H) < 1e-12

    def test_linearity(self, small_spec):
        p = [0.5, 0.5, 6.0]
        np.testing.assert_array_equal(reconstruct_channel(p, 0.0, small_spec), 0)
        a = reconstruct_channel(p, 1.0, small_spec)
        np.testing.assert_allclose(reconstruct_channel(p, 2 - 3j, small_spec), (2 - 3j) * a, rtol=1e-14)
