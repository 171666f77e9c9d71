import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_local_tv, brute_force_moments, brute_force_sdt, jacobi_eigenvalues, random_rotation
from umcf.evaluation import PhantomSpec, generate_phantom
from umcf.field import InvalidInputError
from umcf.spatial import (
    SpatialStats,
    boundary_voxels,
    build_spatial_tokens,
    hier_token,
    local_tv,
    mean_sdt,
    signed_distance_transform,
    spatial_stats,
    sym3_eigenvalues,
    topo_features,
    weighted_centroid,
    weighted_covariance,
)


def _probmaps(pc):
    return np.stack([pc, pc, pc], axis=-1)


class TestMoments:
    def test_uniform_centroid(self):
        mu, mass, degenerate = weighted_centroid(np.ones((5, 5, 5)))
        np.testing.assert_allclose(mu, [2, 2, 2])
        assert mass == 125 and not degenerate

    def test_point_mass(self):
        p = np.zeros((4, 5, 6))
        p[1, 2, 3] = 0.7
        mu, _, _ = weighted_centroid(p)
        np.testing.assert_allclose(mu, [1, 2, 3])
        cov, _ = weighted_covariance(p, mu)
        np.testing.assert_allclose(cov, np.zeros((3, 3)), atol=1e-24)

    def test_two_masses(self):
        p = np.zeros((3, 1, 1))
        p[0, 0, 0] = p[2, 0, 0] = 1.0
        mu, _, _ = weighted_centroid(p)
        cov, _ = weighted_covariance(p, mu)
        np.testing.assert_allclose(cov, np.diag([1.0, 0.0, 0.0]))

    def test_zero_mass_fallback(self):
        mu, mass, degenerate = weighted_centroid(np.zeros((4, 6, 3)))
        assert degenerate and mass == 0.0
        np.testing.assert_allclose(mu, [1.5, 2.5, 1.0])
        cov, degenerate = weighted_covariance(np.zeros((4, 6, 3)), mu)
        assert degenerate and not cov.any()
        st_ = spatial_stats(np.zeros((4, 6, 3, 3)), "ET")
        assert st_.degenerate and st_.eigenvalues == (0.0, 0.0, 0.0) and st_.mean_sdt == 0.0

    def test_random_matches_loops(self, rng):
        for _ in range(5):
            p = rng.random((8, 8, 8))
            mu, mass, _ = weighted_centroid(p)
            cov, _ = weighted_covariance(p, mu)
            mu_o, cov_o, mass_o = brute_force_moments(p)
            np.testing.assert_allclose(mu, mu_o, rtol=1e-9)
            np.testing.assert_allclose(cov, cov_o, rtol=1e-8)
            assert mass == pytest.approx(mass_o, rel=1e-12)
            np.testing.assert_array_equal(cov, cov.T)

    def test_translation_equivariance(self, rng):
        p = np.zeros((16, 16, 16))
        blob = rng.random((5, 4, 6))
        p[3:8, 4:8, 2:8] = blob
        q = np.zeros_like(p)
        q[6:11, 5:9, 7:13] = blob
        a, b = spatial_stats(_probmaps(p), "WT"), spatial_stats(_probmaps(q), "WT")
        np.testing.assert_allclose(b.centroid - a.centroid, [3, 1, 5], atol=1e-12)
        np.testing.assert_allclose(b.covariance, a.covariance, atol=1e-10)
        np.testing.assert_allclose(b.eigenvalues, a.eigenvalues, atol=1e-10)
        # Inside distances move with the blob; the outside ones feel the grid edge.
        sa, _ = signed_distance_transform(p > 0.5)
        sb, _ = signed_distance_transform(q > 0.5)
        np.testing.assert_array_equal(sb[6:11, 5:9, 7:13][blob > 0.5], sa[3:8, 4:8, 2:8][blob > 0.5])


class TestEigenvalues:
    def test_examples(self):
        assert sym3_eigenvalues(np.diag([3.0, 1.0, 2.0])) == (3.0, 2.0, 1.0)
        assert sym3_eigenvalues(np.eye(3)) == (1.0, 1.0, 1.0)

    def test_asymmetric_rejected(self):
        m = np.eye(3)
        m[0, 1] = 1e-3
        with pytest.raises(InvalidInputError):
            sym3_eigenvalues(m)

    def test_known_matrix(self):
        # Tridiagonal matrix with eigenvalues 3, 6, 9.
        m = np.array([[7.0, -2.0, 0.0], [-2.0, 6.0, -2.0], [0.0, -2.0, 5.0]])
        np.testing.assert_allclose(sym3_eigenvalues(m), (9.0, 6.0, 3.0), rtol=1e-12)

    def test_against_jacobi(self, rng):
        for _ in range(200):
            a = rng.normal(size=(3, 3)) * 10 ** rng.uniform(-3, 3)
            m = a + a.T
            got = np.array(sym3_eigenvalues(m))
            want = np.array(jacobi_eigenvalues(m))
            assert np.max(np.abs(got - want)) <= 1e-8 * max(1.0, np.linalg.norm(m))

    def test_repeated_eigenvalues(self, rng):
        r = random_rotation(rng)
        m = r @ np.diag([2.0, 2.0, -1.0]) @ r.T
        m = 0.5 * (m + m.T)
        np.testing.assert_allclose(sym3_eigenvalues(m), (2.0, 2.0, -1.0), atol=1e-7)

    @given(st.integers(0, 2**32 - 1))
    def test_rotation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 3))
        s = a @ a.T
        r = random_rotation(rng)
        rs = r @ s @ r.T
        rs = 0.5 * (rs + rs.T)
        np.testing.assert_allclose(sym3_eigenvalues(rs), sym3_eigenvalues(s), atol=1e-7)
        lam = sym3_eigenvalues(s)
        assert sum(lam) == pytest.approx(np.trace(s), rel=1e-8)
        assert lam[0] * lam[1] * lam[2] == pytest.approx(np.linalg.det(s), rel=1e-6, abs=1e-12)


class TestSignedDistance:
    def test_single_voxel(self):
        m = np.zeros((3, 3, 3), bool)
        m[1, 1, 1] = True
        sdt, degenerate = signed_distance_transform(m)
        assert not degenerate
        assert sdt[1, 1, 1] == 1.0
        assert sdt[0, 0, 0] == pytest.approx(-math.sqrt(3))
        np.testing.assert_allclose(sdt, brute_force_sdt(m), atol=1e-12)

    def test_half_space(self):
        m = np.zeros((4, 4, 4), bool)
        m[:2] = True
        sdt, _ = signed_distance_transform(m)
        for x, want in enumerate([2.0, 1.0, -1.0, -2.0]):
            np.testing.assert_array_equal(sdt[x], want)
        np.testing.assert_allclose(sdt, brute_force_sdt(m), atol=1e-12)
        assert mean_sdt(sdt) == pytest.approx(float(np.sum(brute_force_sdt(m))) / 64)

    def test_flip_negates(self, rng):
        m = rng.random((7, 5, 6)) < 0.4
        a, _ = signed_distance_transform(m)
        b, _ = signed_distance_transform(~m)
        np.testing.assert_array_equal(a, -b)
        assert mean_sdt(a) == pytest.approx(-mean_sdt(b), abs=1e-12)

    def test_degenerate_masks(self):
        for m in (np.zeros((3, 4, 5), bool), np.ones((3, 4, 5), bool)):
            sdt, degenerate = signed_distance_transform(m)
            assert degenerate and not sdt.any()
        assert mean_sdt(np.zeros((2, 2, 2))) == 0.0

    @given(st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)), st.floats(0.05, 0.95),
           st.integers(0, 2**31))
    def test_matches_brute_force(self, dims, density, seed):
        m = np.random.default_rng(seed).random(dims) < density
        sdt, _ = signed_distance_transform(m)
        np.testing.assert_allclose(sdt, brute_force_sdt(m), atol=1e-4)


class TestTokens:
    def test_hier_token_examples(self):
        st1 = SpatialStats(np.zeros(3), np.zeros((3, 3)), (0.0, 0.0, 0.0), 1.0, 1.0, False)
        v, _ = hier_token(st1)
        np.testing.assert_allclose(v, [0, 0, 0, 0, 0, 0, 1])
        st2 = SpatialStats(np.array([3.0, 0, 0]), np.zeros((3, 3)), (4.0, 0.0, 0.0), 0.0, 1.0, False)
        v, _ = hier_token(st2)
        np.testing.assert_allclose(v, [0.6, 0, 0, 0.8, 0, 0, 0])

    def test_hier_token_random(self, rng):
        for _ in range(20):
            mu, lam, dbar = rng.normal(size=3) * 10, np.sort(rng.random(3))[::-1] * 50, rng.normal() * 4
            v, _ = hier_token(SpatialStats(mu, np.zeros((3, 3)), tuple(lam), dbar, 1.0, False))
            raw = np.array([*mu, *lam, dbar])
            np.testing.assert_allclose(v, raw / math.sqrt(sum(x * x for x in raw)), atol=1e-9)

    def test_topo_constant_and_full(self):
        p = _probmaps(np.full((5, 5, 5), 0.8))
        tf = topo_features(p, "TC")
        assert tf.smoothness == 0.0 and tf.boundary_gradient == 0.0
        assert tf.surface_to_volume == 0.0 and not tf.degenerate
        empty = topo_features(_probmaps(np.full((5, 5, 5), 0.2)), "TC")
        assert empty.degenerate and empty.surface_to_volume == 0.0

    def test_topo_random_matches_loops(self, rng):
        pc = rng.random((8, 8, 8))
        tf = topo_features(_probmaps(pc), "ET")
        assert tf.smoothness == pytest.approx(brute_force_local_tv(pc).mean(), abs=1e-9)
        mask = pc > 0.5
        sdt = brute_force_sdt(mask)
        band = np.abs(sdt) <= 2.0
        gx, gy, gz = np.gradient(pc)
        grad = np.sqrt(gx ** 2 + gy ** 2 + gz ** 2)
        assert tf.boundary_gradient == pytest.approx(grad[band].mean(), abs=1e-9)
        exposed = 0
        for i, j, k in np.argwhere(mask):
            for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                a, b, c = i + d[0], j + d[1], k + d[2]
                if 0 <= a < 8 and 0 <= b < 8 and 0 <= c < 8 and not mask[a, b, c]:
                    exposed += 1
                    break
        assert tf.surface_to_volume == pytest.approx(exposed / mask.sum(), abs=1e-12)

    def test_local_tv_checkerboard(self):
        idx = np.indices((6, 6, 6)).sum(axis=0)
        np.testing.assert_array_equal(local_tv((idx % 2).astype(float)), 1.0)

    def test_boundary_voxels_cube(self):
        m = np.zeros((5, 5, 5), bool)
        m[1:4, 1:4, 1:4] = True
        assert boundary_voxels(m).sum() == 26

    def test_six_tokens_order(self, small_phantom):
        ts = build_spatial_tokens(small_phantom.probmaps, 8, seed=0)
        assert len(ts) == 6
        assert ts.labels == ("ET-hier", "TC-hier", "WT-hier", "ET-topo", "TC-topo", "WT-topo")
        np.testing.assert_allclose(np.linalg.norm(ts.tokens, axis=1), 1.0, atol=1e-6)
        assert not ts.prototype_degenerate

    def test_all_degenerate(self):
        ts = build_spatial_tokens(np.zeros((4, 4, 4, 3)), 8, seed=0)
        assert len(ts) == 6 and ts.degenerate.all() and ts.prototype_degenerate
        assert not ts.tokens.any()

    def test_spheres_isotropic(self):
        spec = PhantomSpec(dims=(33, 33, 33), wt_axes=(12.0,) * 3, tc_axes=(8.0,) * 3, et_axes=(5.0,) * 3, blur=0.0)
        ph = generate_phantom(spec)
        for c in ("ET", "TC", "WT"):
            lam = spatial_stats(ph.probmaps, c).eigenvalues
            assert (lam[0] - lam[2]) / lam[0] <= 0.10
