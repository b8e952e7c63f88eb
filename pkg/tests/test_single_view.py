import math

import numpy as np
import pytest

from viewgeo.single_view import (
    SvConfig,
    _cross_values,
    cross_loss,
    discrepancy_field,
    svgeo_gradients,
    svgeo_loss,
    svn_loss,
    tv_normal_loss,
)

FD_H = 1e-5


def unit_normals(rng, shape):
    n = rng.normal(size=shape + (3,))
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def make_kink_free_instance(rng, h=8, w=8):
    """Random fields whose L1/absolute-value kinks sit at least 1e-3 away."""
    img = rng.uniform(0, 1, (h, w, 3))
    nd = unit_normals(rng, (h, w))
    sign = rng.choice([-1.0, 1.0], size=(h, w, 3))
    n = nd - sign * rng.uniform(1e-3, 0.4, (h, w, 3))
    weights = rng.uniform(0.1, 1.0, (h, w))
    mask = rng.uniform(size=(h, w)) < 0.4
    less = rng.uniform(size=(h, w)) < 0.5
    delta = None
    for _ in range(200):
        delta = rng.normal(0, 0.5, (h, w))
        if not mask.any() or np.all(np.abs(_cross_values(delta, n)[mask]) > 1e-3):
            break
    return img, nd, n, weights, delta, mask, less


class TestDiscrepancy:
    def test_equal_fields(self):
        d = np.random.default_rng(0).uniform(1, 2, (3, 3))
        assert np.all(discrepancy_field(d, d) == 0.0)

    def test_offset(self):
        d = np.ones((2, 2))
        assert np.all(discrepancy_field(d + 1.0, d) == 1.0)

    def test_signed(self):
        assert discrepancy_field(np.array([[2.0]]), np.array([[3.0]]))[0, 0] == -1.0


class TestCrossLoss:
    def test_constant_discrepancy(self):
        n = unit_normals(np.random.default_rng(1), (4, 4))
        assert cross_loss(np.full((4, 4), 2.3), n, np.ones((4, 4), bool)) == 0.0

    def test_unit_x_ramp_against_y_normal(self):
        delta = np.tile(np.arange(5.0), (5, 1))
        n = np.tile([0.0, 1.0, 0.0], (5, 5, 1))
        assert cross_loss(delta, n, np.ones((5, 5), bool)) == pytest.approx(1.0)

    def test_gradient_parallel_to_normal(self):
        delta = np.tile(np.arange(5.0), (5, 1))
        n = np.tile([1.0, 0.0, 0.0], (5, 5, 1))
        assert cross_loss(delta, n, np.ones((5, 5), bool)) == 0.0

    def test_empty_mask(self):
        assert cross_loss(np.ones((3, 3)), np.zeros((3, 3, 3)), np.zeros((3, 3), bool)) == 0.0


class TestSvnLoss:
    def test_perfect_agreement(self):
        rng = np.random.default_rng(2)
        n = unit_normals(rng, (4, 4))
        w = rng.uniform(size=(4, 4))
        assert svn_loss(n, n, w, np.ones((4, 4)), np.ones((4, 4), bool), 0.05) == 0.0

    def test_single_pixel(self):
        n = np.tile([0.0, 0.0, 1.0], (3, 3, 1))
        nd = n.copy()
        nd[1, 1, 0] += 0.1
        mask = np.zeros((3, 3), bool)
        mask[1, 1] = True
        w = np.ones((3, 3))
        assert svn_loss(nd, n, w, np.ones((3, 3)), mask, 0.05) == pytest.approx(0.1)

    def test_linear_weighting(self):
        n = np.tile([0.0, 0.0, 1.0], (3, 3, 1))
        nd = n.copy()
        nd[1, 1, 0] += 0.1
        mask = np.zeros((3, 3), bool)
        mask[1, 1] = True
        w = np.full((3, 3), 0.5)
        assert svn_loss(nd, n, w, np.ones((3, 3)), mask, 0.05) == pytest.approx(0.05)


class TestTvNormalLoss:
    def test_constant_normals(self):
        img = np.random.default_rng(3).uniform(size=(4, 4, 3))
        n = np.tile([0.0, 0.0, 1.0], (4, 4, 1))
        assert tv_normal_loss(img, n, np.ones((4, 4), bool)) == 0.0

    def test_vertical_pair_identical_colors(self):
        img = np.full((2, 1, 3), 0.5)
        n = np.zeros((2, 1, 3))
        n[0, 0] = [0.0, 0.0, 1.0]
        n[1, 0] = [0.0, 0.0, 1.0 + math.sqrt(0.5)]
        mask = np.array([[False], [True]])  # only the lower pixel counts
        assert tv_normal_loss(img, n, mask) == pytest.approx(0.5)

    def test_vertical_pair_full_color_difference(self):
        img = np.zeros((2, 1, 3))
        img[1, 0] = 1.0
        n = np.zeros((2, 1, 3))
        n[1, 0, 2] = math.sqrt(0.5)
        mask = np.array([[False], [True]])
        assert tv_normal_loss(img, n, mask) == pytest.approx(math.exp(-1.0) * 0.5)

    def test_empty_set(self):
        img = np.zeros((3, 3, 3))
        assert tv_normal_loss(img, np.zeros((3, 3, 3)), np.zeros((3, 3), bool)) == 0.0


class TestSvgeoLoss:
    def test_silent_at_agreement(self):
        rng = np.random.default_rng(4)
        n = unit_normals(rng, (6, 6))
        img = rng.uniform(size=(6, 6, 3))
        w = np.ones((6, 6))
        rep = svgeo_loss(img, n, n, w, np.zeros((6, 6)), np.ones((6, 6), bool),
                         np.zeros((6, 6), bool), SvConfig())
        assert rep.l_svgeo < 1e-10

    def test_lam2_zero_drops_tv(self):
        rng = np.random.default_rng(5)
        img, nd, n, w, delta, mask, less = make_kink_free_instance(rng)
        rep = svgeo_loss(img, nd, n, w, delta, mask, less, SvConfig(lam2=0.0))
        assert rep.l_svgeo == rep.l_svn
        assert rep.tv_normal > 0.0  # still reported, just unweighted

    def test_doubling_lam2_doubles_tv_share(self):
        rng = np.random.default_rng(6)
        img, nd, n, w, delta, mask, less = make_kink_free_instance(rng)
        r1 = svgeo_loss(img, nd, n, w, delta, mask, less, SvConfig(lam2=0.01))
        r2 = svgeo_loss(img, nd, n, w, delta, mask, less, SvConfig(lam2=0.02))
        assert r2.l_svgeo - r2.l_svn == 2.0 * (r1.l_svgeo - r1.l_svn)

    def test_report_identity(self):
        rng = np.random.default_rng(7)
        img, nd, n, w, delta, mask, less = make_kink_free_instance(rng)
        cfg = SvConfig()
        rep = svgeo_loss(img, nd, n, w, delta, mask, less, cfg)
        assert rep.l_svgeo == pytest.approx(rep.l_svn + cfg.lam2 * rep.tv_normal, abs=1e-12)
        assert rep.n_rich_trust == int(mask.sum())
        assert rep.n_less == int(less.sum())

    def test_nonnegative_terms(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            img, nd, n, w, delta, mask, less = make_kink_free_instance(rng, 5, 5)
            rep = svgeo_loss(img, nd, n, w, delta, mask, less, SvConfig())
            assert rep.l_svn >= 0 and rep.l_cross >= 0
            assert rep.tv_normal >= 0 and rep.l_svgeo >= 0

    def test_mask_locality_bit_exact(self):
        rng = np.random.default_rng(9)
        img, nd, n, w, delta, mask, less = make_kink_free_instance(rng)
        cfg = SvConfig()
        base = svgeo_loss(img, nd, n, w, delta, mask, less, cfg).l_svgeo
        # pixels outside the svn mask and outside the TV stencil of any
        # texture-less pixel may change normals freely
        stencil = less.copy()
        stencil[:-1, :] |= less[1:, :]
        stencil[:, :-1] |= less[:, 1:]
        free = ~mask & ~stencil
        if free.any():
            i, j = np.argwhere(free)[0]
            n2 = n.copy()
            n2[i, j] = [5.0, -7.0, 1.0]
            after = svgeo_loss(img, nd, n2, w, delta, mask, less, cfg).l_svgeo
            assert after == base


class TestGradients:
    def test_zero_at_minimum(self):
        rng = np.random.default_rng(10)
        n = unit_normals(rng, (5, 5))
        img = rng.uniform(size=(5, 5, 3))
        gn, gd = svgeo_gradients(img, n, n, np.ones((5, 5)), np.zeros((5, 5)),
                                 np.ones((5, 5), bool), np.zeros((5, 5), bool), SvConfig())
        assert np.all(gn == 0.0) and np.all(gd == 0.0)

    def test_l1_sign_at_single_pixel(self):
        n = np.tile([0.0, 0.0, 1.0], (3, 3, 1))
        nd = n.copy()
        nd[1, 1] = [0.1, -0.2, 1.3]
        mask = np.zeros((3, 3), bool)
        mask[1, 1] = True
        gn, _ = svgeo_gradients(np.zeros((3, 3, 3)), nd, n, np.ones((3, 3)),
                                np.ones((3, 3)), mask, np.zeros((3, 3), bool),
                                SvConfig(lam1=0.0, lam2=0.0))
        assert np.allclose(gn[1, 1], -np.sign(nd[1, 1] - n[1, 1]))
        gn[1, 1] = 0.0
        assert np.all(gn == 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(20240811)
        cfg = SvConfig()
        worst = 0.0
        for _ in range(50):
            img, nd, n, w, delta, mask, less = make_kink_free_instance(rng)

            def loss(nn, dd):
                return svgeo_loss(img, nd, nn, w, dd, mask, less, cfg).l_svgeo

            gn, gd = svgeo_gradients(img, nd, n, w, delta, mask, less, cfg)
            fd_n = np.zeros_like(gn)
            fd_d = np.zeros_like(gd)
            for i in range(8):
                for j in range(8):
                    for c in range(3):
                        up, dn = n.copy(), n.copy()
                        up[i, j, c] += FD_H
                        dn[i, j, c] -= FD_H
                        fd_n[i, j, c] = (loss(up, delta) - loss(dn, delta)) / (2 * FD_H)
                    up, dn = delta.copy(), delta.copy()
                    up[i, j] += FD_H
                    dn[i, j] -= FD_H
                    fd_d[i, j] = (loss(n, up) - loss(n, dn)) / (2 * FD_H)
            scale = max(np.abs(fd_n).max(), np.abs(fd_d).max(), 1e-12)
            err = max(np.abs(gn - fd_n).max(), np.abs(gd - fd_d).max()) / scale
            worst = max(worst, err)
        assert worst < 1e-4
