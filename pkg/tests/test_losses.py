import math

import numpy as np
import pytest

from wavenhance.checkpoint import write_tensors
from wavenhance.losses import (
    SOBEL_X,
    SOBEL_Y,
    LossConfig,
    PerceptualExtractor,
    channel_loss,
    edge_loss,
    gaussian_kernel,
    global_loss,
    perceptual_term,
    pixel_loss,
    region_split,
    smooth_l1,
    ssim_global,
    total_loss,
)
from wavenhance.tensor import ShapeError, Tensor, depthwise_conv2d, grad_check

CFG = LossConfig()


def img(rng, n=1, h=16, w=16, lo=0.1, hi=0.9):
    return rng.uniform(lo, hi, size=(n, h, w, 3))


class TestSmoothL1:
    @pytest.mark.parametrize("d,beta,expected", [(0.0, 1.0, 0.0), (0.5, 1.0, 0.125), (2.0, 1.0, 1.5),
                                                 (-2.0, 1.0, 1.5), (0.1, 0.2, 0.025)])
    def test_values(self, d, beta, expected):
        assert smooth_l1(d, beta) == pytest.approx(expected, abs=1e-15)

    def test_continuous_at_threshold(self):
        assert smooth_l1(1.0 - 1e-9) == pytest.approx(smooth_l1(1.0 + 1e-9), abs=1e-8)

    def test_bad_beta(self):
        with pytest.raises(ValueError):
            smooth_l1(1.0, 0.0)


class TestConfig:
    def test_defaults(self):
        assert (CFG.w1, CFG.w2, CFG.w3, CFG.w4) == (1.0, 1.5, 1.0, 1.0)
        assert CFG.bright_fraction == 0.3 and CFG.gauss_a == 0.2 and CFG.gauss_ksize == 11

    @pytest.mark.parametrize("kw", [{"w1": -1}, {"bright_fraction": 0.0}, {"bright_fraction": 1.0},
                                    {"gauss_ksize": 10}, {"ssim_c1": 0.0}, {"smooth_l1_beta": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)


class TestRegionSplit:
    def test_counts_and_partition(self, rng):
        G = img(rng, n=2, h=10, w=7)
        s = region_split(G, 0.3)
        assert s.bright_count == 2 * round(0.3 * 70)
        assert s.bright_count + s.dark_count == 140
        lum = G @ np.array([0.299, 0.587, 0.114])
        for n in range(2):
            assert lum[n][s.bright_mask[n]].min() >= lum[n][~s.bright_mask[n]].max()

    def test_stable_tie_break(self):
        G = np.zeros((1, 2, 5, 3))
        G[0, 0, :] = 1.0  # five equally bright pixels, only round(0.3*10) = 3 are taken
        mask = region_split(G, 0.3).bright_mask[0]
        np.testing.assert_array_equal(mask[0], [True, True, True, False, False])
        assert not mask[1].any()

    def test_constant_reference_has_no_bright_region(self):
        s = region_split(np.full((1, 4, 4, 3), 0.4), 0.3)
        assert s.bright_count == 0 and s.dark_count == 16


class TestPixelLoss:
    def test_identity(self, rng):
        G = img(rng)
        assert pixel_loss(Tensor(G), Tensor(G), CFG).item() == 0.0

    def test_uniform_offset(self, rng):
        G = img(rng, lo=0.0, hi=0.5)
        assert pixel_loss(Tensor(G + 0.5), Tensor(G), CFG).item() == pytest.approx(0.3125, abs=1e-12)

    def test_constant_reference_only_dark_term(self):
        G = np.full((1, 8, 8, 3), 0.25)
        assert pixel_loss(Tensor(G + 0.5), Tensor(G), CFG).item() == pytest.approx(0.125, abs=1e-12)

    def test_gradient_flows_to_estimate_only(self, rng):
        E = Tensor(img(rng), requires_grad=True)
        G = Tensor(img(rng), requires_grad=True)
        pixel_loss(E, G, CFG).backward()
        assert E.grad is not None and G.grad is None


class TestGlobalLoss:
    def test_identity(self, rng):
        G = img(rng)
        ext = PerceptualExtractor()
        assert global_loss(Tensor(G), Tensor(G), ext, CFG).item() == -1.0
        assert ssim_global(Tensor(G), Tensor(G)).item() == 1.0

    def test_constant_images_closed_form(self):
        c1 = 1e-4
        s = ssim_global(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.ones((1, 4, 4, 3))), c1, 9e-4).item()
        assert s == pytest.approx(c1 / (1 + c1), rel=1e-12)
        assert s == pytest.approx(9.999e-5, rel=1e-4)

    def test_ssim_symmetric(self, rng):
        a, b = Tensor(img(rng, n=2)), Tensor(img(rng, n=2))
        assert ssim_global(a, b).item() == pytest.approx(ssim_global(b, a).item(), abs=1e-15)

    def test_w3_linearity(self, rng):
        E, G = Tensor(img(rng)), Tensor(img(rng))
        ext = PerceptualExtractor()
        p1 = global_loss(E, G, ext, LossConfig(w4=0.0)).item()
        p2 = global_loss(E, G, ext, LossConfig(w3=2.0, w4=0.0)).item()
        assert p1 > 0 and p2 == 2 * p1

    def test_perceptual_normalization(self, rng):
        E, G = Tensor(img(rng)), Tensor(img(rng))
        ext = PerceptualExtractor()
        fe, fg = ext(E).data, ext(G).data
        assert fe.shape == (1, 2, 2, 32)
        assert perceptual_term(E, G, ext).item() == pytest.approx(np.mean((fe - fg) ** 2), rel=1e-12)


class TestPerceptualExtractor:
    def test_deterministic_and_frozen(self):
        a, b = PerceptualExtractor(seed=3), PerceptualExtractor(seed=3)
        for k, v in a.named_weights().items():
            np.testing.assert_array_equal(v, b.named_weights()[k])
            with pytest.raises(ValueError):
                v[...] = 0.0

    def test_tap(self, rng):
        x = Tensor(img(rng))
        assert PerceptualExtractor(tap=1)(x).shape == (1, 8, 8, 8)
        with pytest.raises(ValueError):
            PerceptualExtractor(tap=4)

    def test_from_file(self, tmp_path, rng):
        ext = PerceptualExtractor(seed=11)
        write_tensors(tmp_path / "phi.r2mw", ext.named_weights())
        loaded = PerceptualExtractor.from_file(tmp_path / "phi.r2mw")
        x = Tensor(img(rng))
        np.testing.assert_array_equal(loaded(x).data, ext(x).data)
        write_tensors(tmp_path / "empty.r2mw", {"x": np.zeros(1)})
        with pytest.raises(ValueError):
            PerceptualExtractor.from_file(tmp_path / "empty.r2mw")


def _sobel_stencil(plane, K):
    H, W = plane.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            for a in range(3):
                for b in range(3):
                    ii, jj = i + a - 1, j + b - 1
                    if 0 <= ii < H and 0 <= jj < W:
                        out[i, j] += K[a][b] * plane[ii, jj]
    return out


class TestEdgeLoss:
    def test_identity(self, rng):
        G = img(rng)
        assert edge_loss(Tensor(G), Tensor(G)).item() == 0.0

    def test_constant_images(self):
        c = np.full((1, 6, 6, 3), 0.3)
        assert edge_loss(Tensor(c), Tensor(c.copy())).item() == 0.0
        # away from the zero-padded border the Sobel response of any constant vanishes
        for v in (0.0, 0.3, 1.0):
            for K in (SOBEL_X, SOBEL_Y):
                r = depthwise_conv2d(Tensor(np.full((1, 6, 6, 3), v)), K).data
                np.testing.assert_allclose(r[:, 1:-1, 1:-1], 0.0, atol=1e-15)

    def test_vertical_step_stencil(self):
        E = np.zeros((1, 6, 6, 3))
        E[:, :, 3:] = 1.0
        G = np.full((1, 6, 6, 3), 0.5)
        expected = sum(np.mean(np.abs(_sobel_stencil(E[0, :, :, 0], K) - _sobel_stencil(G[0, :, :, 0], K)))
                       for K in (SOBEL_X, SOBEL_Y))
        got = edge_loss(Tensor(E), Tensor(G)).item()
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(2.333333333333333, abs=1e-12)  # frozen stencil value, 7/3

    def test_sobel_kernels(self):
        np.testing.assert_array_equal(SOBEL_X, [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]])
        np.testing.assert_array_equal(SOBEL_Y, SOBEL_X.T)


class TestGaussianKernel:
    def test_center_and_symmetry(self):
        K = gaussian_kernel(CFG)
        assert K.shape == (11, 11)
        assert K[5, 5] == 0.2
        np.testing.assert_array_equal(K, K[::-1, :])
        np.testing.assert_array_equal(K, K[:, ::-1])

    def test_sum_matches_direct_summation(self):
        S = 0.0
        for k in range(11):
            for l in range(11):
                S += 0.2 * math.exp(-(k - 5) ** 2 / (2 * 3.0) - (l - 5) ** 2 / (2 * 3.0))
        assert gaussian_kernel(CFG).sum() == pytest.approx(S, rel=1e-13)
        assert S == pytest.approx(3.7602357725023707, rel=1e-13)

    def test_anisotropic(self):
        K = gaussian_kernel(LossConfig(gauss_sigma_x=1.0, gauss_sigma_y=4.0, gauss_ksize=5))
        assert K[2, 0] > K[0, 2]  # wider spread along columns


class TestChannelLoss:
    def test_identity(self, rng):
        G = img(rng)
        assert channel_loss(Tensor(G), Tensor(G), CFG).item() == 0.0

    @pytest.mark.parametrize("delta", [0.1, -0.05])
    def test_red_shift(self, rng, delta):
        G = img(rng, h=16, w=20)
        E = G.copy()
        E[..., 0] += delta
        S = gaussian_kernel(CFG).sum()
        assert channel_loss(Tensor(E), Tensor(G), CFG).item() == pytest.approx(abs(delta) * 16 * 20 * S, abs=1e-9)

    def test_channel_permutation(self, rng):
        E, G = img(rng), img(rng)
        perm = [2, 0, 1]
        a = channel_loss(Tensor(E), Tensor(G), CFG).item()
        b = channel_loss(Tensor(E[..., perm]), Tensor(G[..., perm]), CFG).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_texture_invariance(self, rng):
        E, G = img(rng, h=32, w=32), img(rng, h=32, w=32)
        base = channel_loss(Tensor(E), Tensor(G), CFG).item()
        T = E.copy()
        for (i, j), s in (((10, 12), 1), ((20, 15), -1), ((14, 21), 1), ((17, 9), -1)):
            T[0, i, j] += s * 0.05  # symmetric +/- pairs, more than a kernel radius from the border
        assert channel_loss(Tensor(T), Tensor(G), CFG).item() == pytest.approx(base, abs=1e-9)

    def test_requires_three_channels(self, rng):
        x = Tensor(rng.random((1, 8, 8, 2)))
        with pytest.raises(ShapeError):
            channel_loss(x, x, CFG)


class TestTotalLoss:
    def test_identity(self, rng):
        G = Tensor(img(rng))
        res = total_loss(G, G, PerceptualExtractor(), CFG)
        assert res.total.item() == -1.0
        assert res.components == {"pixel": 0.0, "global": -1.0, "edge": 0.0, "channel": 0.0, "total": -1.0}

    def test_components_sum(self, rng):
        E, G = Tensor(img(rng), requires_grad=True), Tensor(img(rng))
        res = total_loss(E, G, PerceptualExtractor(), CFG)
        c = res.components
        assert c["total"] == pytest.approx(c["pixel"] + c["global"] + c["edge"] + c["channel"], rel=1e-12)
        res.total.backward()
        assert E.grad.shape == E.shape

    @pytest.mark.parametrize("use_edge,use_channel", [(False, False), (True, False), (False, True), (True, True)])
    def test_ablation_rows(self, rng, use_edge, use_channel):
        E, G = Tensor(img(rng)), Tensor(img(rng))
        cfg = LossConfig(use_edge=use_edge, use_channel=use_channel)
        c = total_loss(E, G, PerceptualExtractor(), cfg).components
        assert (c["edge"] > 0) == use_edge and (c["channel"] > 0) == use_channel
        assert c["total"] == pytest.approx(c["pixel"] + c["global"] + c["edge"] + c["channel"], rel=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            total_loss(Tensor(img(rng)), Tensor(img(rng, h=8)), PerceptualExtractor(), CFG)


COMPONENTS = {
    "pixel": lambda E, G: pixel_loss(E, G, CFG),
    "edge": edge_loss,
    "channel": lambda E, G: channel_loss(E, G, CFG),
}


class TestProperties:
    @pytest.mark.parametrize("name", sorted(COMPONENTS))
    def test_local_minimum_at_identity(self, rng, name):
        G = img(rng)
        f = COMPONENTS[name]
        for _ in range(5):
            d = rng.normal(size=G.shape)
            for t in (1e-3, 1e-1):
                assert f(Tensor(G + t * d), Tensor(G)).item() > 0.0

    @pytest.mark.parametrize("name", sorted(COMPONENTS))
    @pytest.mark.parametrize("flip", [(1,), (2,), (1, 2)])
    def test_flip_invariance(self, rng, name, flip):
        E, G = img(rng, h=12, w=10), img(rng, h=12, w=10)
        f = COMPONENTS[name]
        a = f(Tensor(E), Tensor(G)).item()
        b = f(Tensor(np.flip(E, flip).copy()), Tensor(np.flip(G, flip).copy())).item()
        assert b == pytest.approx(a, rel=1e-10, abs=1e-12)

    @pytest.mark.parametrize("name", ["pixel", "global", "edge", "channel"])
    def test_gradients(self, rng, name):
        G = img(rng, h=8, w=8)
        E = G + rng.choice([-1, 1], size=G.shape) * rng.uniform(0.05, 0.3, size=G.shape)
        ext = PerceptualExtractor()
        fn = {**COMPONENTS, "global": lambda e, g: global_loss(e, g, ext, CFG)}[name]
        assert grad_check(lambda t: fn(t, Tensor(G)), E) < 1e-4
