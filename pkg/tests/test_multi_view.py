import math

import numpy as np
import pytest

import viewgeo as vg
from viewgeo.geometry import Camera, Pose, backproject_depth
from viewgeo.multi_view import (
    DegeneratePatchError,
    MvConfig,
    SampleSet,
    candidate_set,
    fuse_weights,
    mvgeo_loss,
    patch_pair_term,
    patch_pca,
    top_s_sample,
    validity_mask,
)


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def eig3_charpoly(cov):
    """Brute-force symmetric 3x3 eigensolver via characteristic polynomial
    roots (trigonometric form); independent of numpy.linalg.eigh."""
    a, b, c = cov[0, 0], cov[1, 1], cov[2, 2]
    d, e, f = cov[0, 1], cov[0, 2], cov[1, 2]
    p1 = d * d + e * e + f * f
    if p1 == 0.0:
        return np.sort(np.array([a, b, c]))
    q = (a + b + c) / 3.0
    p2 = (a - q) ** 2 + (b - q) ** 2 + (c - q) ** 2 + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    bmat = (cov - q * np.eye(3)) / p
    r = np.linalg.det(bmat) / 2.0
    r = min(1.0, max(-1.0, r))
    phi = math.acos(r) / 3.0
    lam1 = q + 2.0 * p * math.cos(phi)
    lam3 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    return np.sort(np.array([lam3, 3.0 * q - lam1 - lam3, lam1]))


def null_vector(mat):
    """Unit vector of the (near) null space via the largest row cross product."""
    best, best_norm = None, -1.0
    rows = [mat[0], mat[1], mat[2]]
    for i in range(3):
        cand = np.cross(rows[i], rows[(i + 1) % 3])
        norm = np.linalg.norm(cand)
        if norm > best_norm:
            best, best_norm = cand, norm
    return best / best_norm


class TestFuseWeights:
    def test_equal_inputs(self):
        w = np.random.default_rng(0).uniform(size=(4, 4))
        assert np.array_equal(fuse_weights(w, w, 0.5), w)

    def test_balanced_mixture(self):
        assert fuse_weights(np.ones((1, 1)), np.zeros((1, 1)), 0.5)[0, 0] == 0.5

    def test_beta_one(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(3, 3)), rng.uniform(size=(3, 3))
        assert np.array_equal(fuse_weights(a, b, 1.0), a)


class TestValidityMask:
    def cam(self, size=6):
        return Camera(fx=float(size), fy=float(size), cx=(size - 1) / 2,
                      cy=(size - 1) / 2, width=size, height=size)

    def test_self_projection_all_valid(self):
        cam = self.cam()
        pts = backproject_depth(np.full((6, 6), 2.0), cam)
        assert validity_mask(pts, cam.pose, cam.pose, cam, 0.1).all()

    def test_near_field_cut(self):
        cam = self.cam()
        pts = backproject_depth(np.full((6, 6), 0.05), cam)
        assert not validity_mask(pts, cam.pose, cam.pose, cam, 0.1).any()

    def test_points_behind_rotated_camera(self):
        cam = self.cam()
        pts = backproject_depth(np.full((6, 6), 2.0), cam)
        flipped = Camera(fx=6.0, fy=6.0, cx=2.5, cy=2.5, width=6, height=6,
                         pose=Pose(rot_y(np.pi), np.zeros(3)))
        assert not validity_mask(pts, cam.pose, flipped.pose, flipped, 0.1).any()


class TestCandidateSet:
    def test_all_invalid(self):
        mask, _ = candidate_set(np.ones((5, 5)), np.zeros((5, 5), bool), 0.3)
        assert not mask.any()

    def test_full_weights_select_interior(self):
        mask, gamma = candidate_set(np.ones((5, 5)), np.ones((5, 5), bool), 0.3)
        expected = np.zeros((5, 5), bool)
        expected[1:-1, 1:-1] = True
        assert np.array_equal(mask, expected)
        assert gamma == pytest.approx(0.3)

    def test_gamma_is_fraction_of_mean(self):
        w = np.full((6, 6), 0.5)
        w[1:-1, 1:-1] = np.repeat([[0.1, 0.9]], 8, axis=0).reshape(4, 4)
        valid = np.ones((6, 6), bool)
        mask, gamma = candidate_set(w, valid, 0.3)
        assert gamma == pytest.approx(0.15)
        assert np.array_equal(mask, (w == 0.9))


class TestTopSSample:
    def test_small_queue_keeps_everything(self):
        w = np.array([[0.0, 0.0, 0.0], [0.0, 0.7, 0.3], [0.0, 0.0, 0.0]])
        cand = w > 0
        s = top_s_sample(cand, w, 10)
        assert len(s) == 2
        assert s.pixels.tolist() == [[1, 1], [1, 2]]
        assert s.weights.tolist() == [0.7, 0.3]

    def test_sort_and_truncate(self):
        w = np.zeros((4, 4))
        w[0, 1], w[3, 3], w[1, 1] = 0.9, 0.8, 0.7
        cand = w > 0
        s = top_s_sample(cand, w, 2)
        assert s.pixels.tolist() == [[0, 1], [3, 3]]

    def test_row_major_tie_break(self):
        w = np.full((3, 3), 0.5)
        s = top_s_sample(np.ones((3, 3), bool), w, 3)
        assert s.pixels.tolist() == [[0, 0], [0, 1], [0, 2]]

    def test_matches_exhaustive_sort_oracle(self):
        rng = np.random.default_rng(7)
        levels = np.array([0.2, 0.5, 0.9])
        for _ in range(300):
            w = levels[rng.integers(0, 3, (5, 5))]
            cand = np.zeros((5, 5), bool)
            cand[1:-1, 1:-1] = rng.uniform(size=(3, 3)) < 0.7
            for s_count in (1, 2, 5, 9):
                got = top_s_sample(cand, w, s_count)
                pix = [tuple(p) for p in np.argwhere(cand)]
                expect = sorted(pix, key=lambda p: (-w[p], p[0], p[1]))[:s_count]
                assert [tuple(p) for p in got.pixels] == expect


class TestPatchPca:
    def grid_points(self, f):
        pts = np.zeros((3, 3, 3))
        for i in range(3):
            for j in range(3):
                pts[i, j] = f(i - 1, j - 1)
        return pts

    def test_flat_patch(self):
        pts = self.grid_points(lambda i, j: [j * 0.1, i * 0.1, 0.0])
        res = patch_pca(pts, (1, 1), np.array([0.0, 0.0, 5.0]))
        assert np.allclose(np.abs(res.normal), [0.0, 0.0, 1.0])
        assert res.normal[2] > 0  # oriented toward the camera at +z
        assert res.eigenvalues[2] == pytest.approx(0.0, abs=1e-15)
        assert res.curvature_weight == pytest.approx(1.0)

    def test_diagonal_plane(self):
        # points on x + y + z = 0 spanning two directions
        pts = self.grid_points(lambda i, j: [i * 0.2, j * 0.3, -i * 0.2 - j * 0.3])
        res = patch_pca(pts, (1, 1), np.array([5.0, 5.0, 5.0]))
        expected = np.ones(3) / np.sqrt(3.0)
        assert min(np.linalg.norm(res.normal - expected),
                   np.linalg.norm(res.normal + expected)) < 1e-9

    def test_isotropic_scatter_weight(self):
        pts = np.zeros((3, 3, 3))
        corners = [(i, j, k) for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)]
        flat = [np.zeros(3)] + [np.array(c, dtype=float) for c in corners]
        for idx, p in enumerate(flat):
            pts[idx // 3, idx % 3] = p
        res = patch_pca(pts, (1, 1), np.array([0.0, 0.0, 9.0]))
        assert np.allclose(res.eigenvalues, res.eigenvalues[0])
        assert res.curvature_weight == pytest.approx(math.exp(-10.0 / 3.0), rel=1e-12)

    def test_degenerate_patch_rejected(self):
        pts = np.ones((3, 3, 3))
        with pytest.raises(DegeneratePatchError):
            patch_pca(pts, (1, 1), np.zeros(3))

    def test_center_must_own_full_patch(self):
        with pytest.raises(ValueError):
            patch_pca(np.zeros((3, 3, 3)), (0, 1), np.zeros(3))

    def test_matches_charpoly_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            pts = rng.normal(size=(3, 3, 3))
            res = patch_pca(pts, (1, 1), rng.normal(size=3))
            patch = pts.reshape(-1, 3)
            centered = patch - patch.mean(axis=0)
            cov = centered.T @ centered
            eigs = eig3_charpoly(cov)
            oracle_normal = null_vector(cov - eigs[0] * np.eye(3))
            # sine-based angle: arccos of the dot cannot resolve below ~1e-8
            angle = math.asin(
                min(1.0, float(np.linalg.norm(np.cross(res.normal, oracle_normal))))
            )
            assert angle < 1e-9
            assert np.allclose(res.eigenvalues[::-1], eigs, rtol=1e-9, atol=1e-9)


class TestPairTerm:
    def test_sign_invariance_bit_exact(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = rng.normal(size=3)
            a /= np.linalg.norm(a)
            b = rng.normal(size=3)
            b /= np.linalg.norm(b)
            w = rng.uniform(0.1, 1.0)
            base = patch_pair_term(a, b, w)
            assert patch_pair_term(-a, b, w) == base
            assert patch_pair_term(a, -b, w) == base
            assert patch_pair_term(-a, -b, w) == base

    def test_range(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            a = rng.normal(size=3)
            a /= np.linalg.norm(a)
            b = rng.normal(size=3)
            b /= np.linalg.norm(b)
            t = patch_pair_term(a, b, rng.uniform(0, 1))
            assert 0.0 <= t <= 1.0


def two_view_inputs(spec):
    bundles = vg.render_scene(spec)
    b0, b1 = bundles
    hat0, _ = vg.unbiased_depth(b0.plane_distance, b0.normals, b0.cam)
    hat1, _ = vg.unbiased_depth(b1.plane_distance, b1.normals, b1.cam)
    return b0, b1, hat0, hat1


class TestMvgeoLoss:
    def test_ground_truth_plane(self):
        spec = vg.make_two_view_spec("tilted-plane", size=32, texture="checker")
        b0, b1, hat0, hat1 = two_view_inputs(spec)
        loss, report = mvgeo_loss(b0.depth, b1.depth, b0.depth, b1.depth,
                                  hat0, hat1, b0.cam, b1.cam, MvConfig())
        assert loss < 1e-8
        assert report.n_accepted_patches == 16
        assert not report.empty

    def test_orthogonal_patches_loss_one(self):
        size = 5
        cam = Camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=size, height=size)
        depth_c = np.full((size, size), 1.0)
        # neighbor depths put columns 1..3 exactly on the plane x = 1
        depth_n = np.full((size, size), 1.0)
        for j in (1, 2, 3):
            depth_n[:, j] = 1.0 / j
        # force the sample onto pixel (2, 2): zero discrepancy only there
        rendered = np.full((size, size), 1.0)
        unbiased = np.full((size, size), 1.1)
        unbiased[2, 2] = 1.0
        loss, report = mvgeo_loss(depth_c, depth_n, rendered, rendered,
                                  unbiased, unbiased, cam, cam, MvConfig(s=1))
        assert report.n_sampled == 1
        assert report.n_accepted_patches == 1
        assert loss == pytest.approx(1.0, abs=1e-12)

    def test_antiparallel_normals_zero(self):
        # the cosine term uses |dot|, so antiparallel equals parallel
        n = np.array([0.3, -0.4, 0.87])
        n /= np.linalg.norm(n)
        assert patch_pair_term(n, -n, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_loss_range_on_noisy_scenes(self):
        for seed in range(3):
            spec = vg.make_two_view_spec("tilted-plane", size=24, texture="checker",
                                         depth_sigma=0.05, seed=seed)
            bundles = vg.observed_bundles(spec)
            b0, b1 = bundles
            hat0, _ = vg.unbiased_depth(b0.plane_distance, b0.normals, b0.cam)
            hat1, _ = vg.unbiased_depth(b1.plane_distance, b1.normals, b1.cam)
            loss, _ = mvgeo_loss(b0.depth, b1.depth, b0.depth, b1.depth,
                                 hat0, hat1, b0.cam, b1.cam, MvConfig())
            assert 0.0 <= loss <= 1.0

    def test_rigid_invariance(self):
        spec = vg.make_two_view_spec("tilted-plane", size=24, texture="checker",
                                     depth_sigma=0.01, seed=3)
        bundles = vg.observed_bundles(spec)
        b0, b1 = bundles
        hat0, _ = vg.unbiased_depth(b0.plane_distance, b0.normals, b0.cam)
        hat1, _ = vg.unbiased_depth(b1.plane_distance, b1.normals, b1.cam)
        base, _ = mvgeo_loss(b0.depth, b1.depth, b0.depth, b1.depth,
                             hat0, hat1, b0.cam, b1.cam, MvConfig())
        # re-express the world: extrinsics become T G^{-1}; depth maps unchanged
        g = Pose(rot_y(0.7), np.array([2.0, -1.0, 0.5]))
        moved = []
        for b in (b0, b1):
            cam = Camera(fx=b.cam.fx, fy=b.cam.fy, cx=b.cam.cx, cy=b.cam.cy,
                         width=b.cam.width, height=b.cam.height,
                         pose=b.cam.pose.compose(g.inverse()))
            moved.append(cam)
        after, _ = mvgeo_loss(b0.depth, b1.depth, b0.depth, b1.depth,
                              hat0, hat1, moved[0], moved[1], MvConfig())
        assert abs(after - base) < 1e-9

    def test_s_zero_is_empty(self):
        spec = vg.make_two_view_spec("tilted-plane", size=16, texture="checker")
        b0, b1, hat0, hat1 = two_view_inputs(spec)
        loss, report = mvgeo_loss(b0.depth, b1.depth, b0.depth, b1.depth,
                                  hat0, hat1, b0.cam, b1.cam, MvConfig(s=0))
        assert loss == 0.0 and report.empty

    def test_dimension_mismatch_rejected(self):
        cam = Camera(fx=4.0, fy=4.0, cx=1.5, cy=1.5, width=4, height=4)
        with pytest.raises(ValueError):
            mvgeo_loss(np.ones((4, 4)), np.ones((5, 5)), np.ones((4, 4)),
                       np.ones((5, 5)), np.ones((4, 4)), np.ones((5, 5)),
                       cam, cam, MvConfig())
