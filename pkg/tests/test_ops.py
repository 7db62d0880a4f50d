import numpy as np
import pytest

from dtcup.gradcheck import finite_diff_grad
from dtcup.ops import (
    ConvSpec,
    SampleGrid,
    TConvSpec,
    conv_backward,
    conv_forward,
    grid_sample,
    grid_sample_backward,
    interp_upsample,
    make_base_grid,
    nearest_upsample,
    nearest_upsample_backward,
    tconv_backward,
    tconv_forward,
)
from dtcup.tensor import ShapeError, Tensor, tensor

from oracles import conv_oracle, grid_sample_oracle, tconv_oracle

X22 = tensor([[[[1.0, 2.0], [3.0, 4.0]]]])


def _rand(rng, shape):
    return tensor(rng.uniform(-1, 1, size=shape))


class TestConvForward:
    def test_identity_kernel(self):
        spec = ConvSpec(tensor([[[[1.0]]]]), (1, 1), (0, 0))
        np.testing.assert_array_equal(conv_forward(X22, spec).data, X22.data)

    def test_all_ones_sum(self):
        spec = ConvSpec(tensor(np.ones((1, 1, 2, 2))), (1, 1), (0, 0))
        np.testing.assert_array_equal(conv_forward(X22, spec).data, [[[[10.0]]]])

    def test_padded_map_matches_oracle(self):
        # Frozen from the direct-summation oracle.
        spec = ConvSpec(tensor(np.ones((1, 1, 2, 2))), (1, 1), (1, 1))
        out = conv_forward(X22, spec)
        expected = [[1.0, 3.0, 2.0], [4.0, 10.0, 6.0], [3.0, 7.0, 4.0]]
        np.testing.assert_allclose(out.data[0, 0], expected, atol=1e-12)
        assert out.data[0, 0, 1, 1] == 10.0
        oracle = conv_oracle(X22.data, spec.kernel.data, spec.stride, spec.padding)
        np.testing.assert_allclose(out.data, oracle, atol=1e-12)

    @pytest.mark.parametrize("g", [2, 3])
    def test_random_against_oracle(self, g):
        rng = np.random.default_rng(11 + g)
        for _ in range(5):
            cin, cout = rng.integers(1, 3, size=2)
            k = int(rng.integers(1, 4 if g == 2 else 3))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            sp = tuple(rng.integers(k, k + 3, size=g))
            x = _rand(rng, (2, cin) + sp)
            kern = _rand(rng, (cout, cin) + (k,) * g)
            spec = ConvSpec(kern, (stride,) * g, (pad,) * g)
            np.testing.assert_allclose(
                conv_forward(x, spec).data,
                conv_oracle(x.data, kern.data, spec.stride, spec.padding),
                atol=1e-12,
            )

    def test_channel_mismatch(self):
        spec = ConvSpec(tensor(np.ones((1, 2, 1, 1))), (1, 1), (0, 0))
        with pytest.raises(ShapeError, match="channels"):
            conv_forward(X22, spec)

    def test_non_positive_output(self):
        spec = ConvSpec(tensor(np.ones((1, 1, 3, 3))), (1, 1), (0, 0))
        with pytest.raises(ShapeError, match="output extent"):
            conv_forward(X22, spec)

    def test_bias(self):
        spec = ConvSpec(tensor([[[[1.0]]]]), (1, 1), (0, 0), bias=tensor([10.0]))
        np.testing.assert_array_equal(conv_forward(X22, spec).data, X22.data + 10.0)


class TestConvBackward:
    def test_zero_grad_out(self):
        spec = ConvSpec(tensor(np.ones((1, 1, 2, 2))), (1, 1), (0, 0))
        gx, gk = conv_backward(X22, spec, tensor(np.zeros((1, 1, 1, 1))))
        assert not gx.data.any() and not gk.data.any()

    def test_identity_kernel_passthrough(self):
        spec = ConvSpec(tensor([[[[1.0]]]]), (1, 1), (0, 0))
        g = tensor([[[[5.0, -1.0], [0.5, 2.0]]]])
        gx, _ = conv_backward(X22, spec, g)
        np.testing.assert_array_equal(gx.data, g.data)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = _rand(rng, (1, 1, 2, 2))
        kern = _rand(rng, (1, 1, 2, 2))
        spec = ConvSpec(kern, (1, 1), (1, 1))
        proj = _rand(rng, (1, 1, 3, 3))
        gx, gk = conv_backward(x, spec, proj)
        fd_x = finite_diff_grad(lambda t: float((conv_forward(t, spec).data * proj.data).sum()), x)
        fd_k = finite_diff_grad(
            lambda t: float((conv_forward(x, ConvSpec(t, (1, 1), (1, 1))).data * proj.data).sum()),
            kern,
        )
        np.testing.assert_allclose(gx.data, fd_x.data, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(gk.data, fd_k.data, rtol=1e-6, atol=1e-9)


class TestTconv:
    def test_single_tap_spread(self):
        spec = TConvSpec(tensor(np.ones((1, 1, 2, 2))), (2, 2), (0, 0))
        out = tconv_forward(tensor([[[[7.0]]]]), spec)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 7.0))

    def test_block_expansion(self):
        spec = TConvSpec(tensor(np.ones((1, 1, 2, 2))), (2, 2), (0, 0))
        out = tconv_forward(X22, spec)
        expected = [
            [1.0, 1.0, 2.0, 2.0],
            [1.0, 1.0, 2.0, 2.0],
            [3.0, 3.0, 4.0, 4.0],
            [3.0, 3.0, 4.0, 4.0],
        ]
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_random_against_scatter_oracle(self):
        rng = np.random.default_rng(5)
        x = _rand(rng, (1, 1, 3, 3))
        kern = _rand(rng, (1, 1, 4, 4))
        spec = TConvSpec(kern, (2, 2), (1, 1))
        out = tconv_forward(x, spec)
        assert out.dims == (1, 1, 6, 6)
        np.testing.assert_allclose(
            out.data, tconv_oracle(x.data, kern.data, (2, 2), (1, 1)), atol=1e-12
        )

    @pytest.mark.parametrize("g", [2, 3])
    def test_random_oracle_nd(self, g):
        rng = np.random.default_rng(17 + g)
        for _ in range(4):
            cin, cout = rng.integers(1, 3, size=2)
            k = int(rng.integers(2, 4))
            s = int(rng.integers(1, 3))
            p = int(rng.integers(0, 2)) if k >= 3 else 0
            sp = tuple(rng.integers(2, 4, size=g))
            x = _rand(rng, (1, cin) + sp)
            kern = _rand(rng, (cin, cout) + (k,) * g)
            spec = TConvSpec(kern, (s,) * g, (p,) * g)
            np.testing.assert_allclose(
                tconv_forward(x, spec).data,
                tconv_oracle(x.data, kern.data, spec.stride, spec.padding),
                atol=1e-12,
            )

    def test_backward_zeros(self):
        spec = TConvSpec(tensor(np.ones((1, 1, 2, 2))), (2, 2), (0, 0))
        gx, gk = tconv_backward(X22, spec, tensor(np.zeros((1, 1, 4, 4))))
        assert not gx.data.any() and not gk.data.any()

    def test_backward_adjoint_of_block_expansion(self):
        spec = TConvSpec(tensor(np.ones((1, 1, 2, 2))), (2, 2), (0, 0))
        g = tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        gx, _ = tconv_backward(X22, spec, g)
        blocks = g.data.reshape(1, 1, 2, 2, 2, 2).sum(axis=(3, 5))
        np.testing.assert_array_equal(gx.data, blocks)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        x = _rand(rng, (1, 2, 2, 2))
        kern = _rand(rng, (2, 1, 2, 2))
        spec = TConvSpec(kern, (2, 2), (0, 0))
        proj = _rand(rng, tconv_forward(x, spec).dims)
        gx, gk = tconv_backward(x, spec, proj)
        fd_x = finite_diff_grad(lambda t: float((tconv_forward(t, spec).data * proj.data).sum()), x)
        fd_k = finite_diff_grad(
            lambda t: float((tconv_forward(x, TConvSpec(t, (2, 2), (0, 0))).data * proj.data).sum()),
            kern,
        )
        np.testing.assert_allclose(gx.data, fd_x.data, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(gk.data, fd_k.data, rtol=1e-6, atol=1e-9)


class TestBaseGrid:
    def test_single_center(self):
        g = make_base_grid(1, (1, 1), 2)
        np.testing.assert_array_equal(g.coords.data, np.zeros((1, 1, 1, 2)))

    def test_two_centers(self):
        g = make_base_grid(1, (2, 2), 2)
        np.testing.assert_allclose(sorted(set(g.coords.data[0, :, 0, 0])), [-0.5, 0.5])

    def test_four_centers(self):
        g = make_base_grid(1, (4, 1), 2)
        np.testing.assert_allclose(g.coords.data[0, :, 0, 0], [-0.75, -0.25, 0.25, 0.75])


class TestGridSample:
    def test_center_of_four_texels(self):
        grid = SampleGrid(tensor(np.zeros((1, 1, 1, 2))))
        assert grid_sample(X22, grid).item() == pytest.approx(2.5, abs=1e-12)

    def test_border_clamp_corner(self):
        grid = SampleGrid(tensor(np.full((1, 1, 1, 2), -1.0)))
        assert grid_sample(X22, grid).item() == pytest.approx(1.0, abs=1e-12)

    def test_identity_grid_exact(self):
        grid = make_base_grid(1, (2, 2), 2)
        np.testing.assert_array_equal(grid_sample(X22, grid).data, X22.data)

    def test_identity_grid_random_sizes(self):
        rng = np.random.default_rng(23)
        for sp in [(3, 5), (7, 7), (2, 3, 4)]:
            g = len(sp)
            x = _rand(rng, (2, 2) + sp)
            grid = make_base_grid(2, sp, g)
            np.testing.assert_allclose(grid_sample(x, grid).data, x.data, atol=1e-12)

    @pytest.mark.parametrize("g", [2, 3])
    def test_random_against_oracle(self, g):
        rng = np.random.default_rng(31 + g)
        sp = (4, 5) if g == 2 else (3, 4, 3)
        x = _rand(rng, (2, 2) + sp)
        out_sp = (3, 3) if g == 2 else (2, 2, 2)
        coords = rng.uniform(-1.2, 1.2, size=(2,) + out_sp + (g,))
        coords = np.clip(coords, -1.0, 1.0)
        grid = SampleGrid(tensor(coords))
        np.testing.assert_allclose(
            grid_sample(x, grid).data, grid_sample_oracle(x.data, coords), atol=1e-12
        )

    def test_convex_combination_bound(self):
        rng = np.random.default_rng(37)
        x = _rand(rng, (1, 3, 5, 5))
        coords = np.clip(rng.uniform(-1.3, 1.3, size=(1, 6, 6, 2)), -1, 1)
        out = grid_sample(x, SampleGrid(tensor(coords)))
        assert out.data.min() >= x.data.min() - 1e-12
        assert out.data.max() <= x.data.max() + 1e-12

    def test_batch_mismatch(self):
        grid = make_base_grid(2, (2, 2), 2)
        with pytest.raises(ShapeError, match="batch"):
            grid_sample(X22, grid)

    def test_rank_mismatch(self):
        grid = make_base_grid(1, (2, 2, 2), 3)
        with pytest.raises(ShapeError, match="rank"):
            grid_sample(X22, grid)


class TestGridSampleBackward:
    def test_zeros(self):
        grid = make_base_grid(1, (3, 3), 2)
        gx, gg = grid_sample_backward(X22, grid, tensor(np.zeros((1, 1, 3, 3))))
        assert not gx.data.any() and not gg.data.any()

    def test_texel_center_one_hot(self):
        grid = make_base_grid(1, (2, 2), 2)  # identity: lands on texel centers
        g = tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        gx, _ = grid_sample_backward(X22, grid, g)
        np.testing.assert_array_equal(gx.data, g.data)

    def test_interior_matches_finite_differences(self):
        from dtcup.gradcheck import safe_grid_coords
        from dtcup.rng import SplitMix

        rng = SplitMix(0, "ops-test")
        x = tensor(SplitMix(1, "x").uniform_range(-1, 1, 2 * 16).reshape(1, 2, 4, 4))
        coords = np.stack(
            [safe_grid_coords(rng, 4, 9), safe_grid_coords(rng, 4, 9)], axis=-1
        ).reshape(1, 3, 3, 2)
        grid = SampleGrid(tensor(coords))
        proj = tensor(SplitMix(2, "p").uniform_range(-1, 1, 2 * 9).reshape(1, 2, 3, 3))
        gx, gg = grid_sample_backward(x, grid, proj)
        fd_x = finite_diff_grad(lambda t: float((grid_sample(t, grid).data * proj.data).sum()), x)
        fd_g = finite_diff_grad(
            lambda t: float((grid_sample(x, SampleGrid(t)).data * proj.data).sum()), grid.coords
        )
        np.testing.assert_allclose(gx.data, fd_x.data, rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(gg.data, fd_g.data, rtol=1e-5, atol=1e-9)

    def test_clamped_axis_zero_gradient(self):
        coords = np.array([[[[-1.0, 0.1]]]])  # first axis clamped, second interior
        grid = SampleGrid(tensor(coords))
        _, gg = grid_sample_backward(X22, grid, tensor(np.ones((1, 1, 1, 1))))
        assert gg.data[0, 0, 0, 0] == 0.0
        assert gg.data[0, 0, 0, 1] != 0.0


class TestInterpUpsample:
    def test_scale_one_identity(self):
        np.testing.assert_array_equal(interp_upsample(X22, 1).data, X22.data)

    def test_half_pixel_values(self):
        x = tensor([[[[1.0, 3.0]]]])
        out = interp_upsample(x, 2)
        np.testing.assert_allclose(out.data[0, 0, 0], [1.0, 1.5, 2.5, 3.0], atol=1e-12)

    def test_constant_stays_constant(self):
        x = tensor(np.full((1, 2, 3, 3), 0.7))
        np.testing.assert_allclose(interp_upsample(x, 2).data, 0.7, atol=1e-12)

    def test_equals_grid_sample_definition(self):
        rng = np.random.default_rng(41)
        x = _rand(rng, (1, 2, 3, 4))
        grid = make_base_grid(1, (6, 8), 2, dtype=np.float64)
        np.testing.assert_array_equal(interp_upsample(x, 2).data, grid_sample(x, grid).data)


class TestNearest:
    def test_forward_repeats(self):
        out = nearest_upsample(X22, 2)
        np.testing.assert_array_equal(out.data[0, 0, :2, :2], 1.0)
        np.testing.assert_array_equal(out.data[0, 0, 2:, 2:], 4.0)

    def test_backward_sums_blocks(self):
        g = tensor(np.ones((1, 1, 4, 4)))
        gx = nearest_upsample_backward(X22, 2, g)
        np.testing.assert_array_equal(gx.data, np.full((1, 1, 2, 2), 4.0))


class TestAdjointAndAgreement:
    def test_conv_tconv_adjoint(self):
        rng = np.random.default_rng(43)
        for g in (2, 3):
            cin, cout, k, s, p = 2, 3, 2, 2, 0
            sp = (4, 4) if g == 2 else (4, 2, 4)
            x = _rand(rng, (1, cin) + sp)
            kern = _rand(rng, (cout, cin) + (k,) * g)
            cspec = ConvSpec(kern, (s,) * g, (p,) * g)
            y = _rand(rng, conv_forward(x, cspec).dims)
            # tconv with the same kernel viewed [Cin_t=Cout, Cout_t=Cin]
            tspec = TConvSpec(kern, (s,) * g, (p,) * g)
            lhs = float((conv_forward(x, cspec).data * y.data).sum())
            rhs = float((x.data * tconv_forward(y, tspec).data).sum())
            assert abs(lhs - rhs) < 1e-10

    def test_2d_3d_agreement_depth_one(self):
        rng = np.random.default_rng(47)
        x2 = _rand(rng, (2, 2, 4, 5))
        x3 = Tensor(x2.data[:, :, None, :, :])
        k2 = _rand(rng, (3, 2, 2, 2))
        k3 = Tensor(k2.data[:, :, None, :, :])
        c2 = conv_forward(x2, ConvSpec(k2, (1, 1), (0, 0)))
        c3 = conv_forward(x3, ConvSpec(k3, (1, 1, 1), (0, 0, 0)))
        np.testing.assert_allclose(c3.data[:, :, 0], c2.data, atol=1e-10)

        t2 = tconv_forward(x2, TConvSpec(Tensor(k2.data.transpose(1, 0, 2, 3)), (2, 2), (0, 0)))
        k3t = Tensor(k2.data.transpose(1, 0, 2, 3)[:, :, None])
        t3 = tconv_forward(x3, TConvSpec(k3t, (1, 2, 2), (0, 0, 0)))
        np.testing.assert_allclose(t3.data[:, :, 0], t2.data, atol=1e-10)

        coords2 = np.clip(rng.uniform(-1, 1, size=(2, 3, 3, 2)), -1, 1)
        coords3 = np.concatenate([np.zeros((2, 3, 3, 1)), coords2], axis=-1).reshape(2, 1, 3, 3, 3)
        s2 = grid_sample(x2, SampleGrid(tensor(coords2)))
        s3 = grid_sample(x3, SampleGrid(tensor(coords3)))
        np.testing.assert_allclose(s3.data[:, :, 0], s2.data, atol=1e-10)

        u2 = interp_upsample(x2, 2)
        u3 = interp_upsample(x3, 2)
        # depth axis of extent 1 upsamples to two identical planes
        np.testing.assert_allclose(u3.data[:, :, 0], u2.data, atol=1e-10)
        np.testing.assert_allclose(u3.data[:, :, 1], u2.data, atol=1e-10)
