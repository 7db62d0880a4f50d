from math import inf

import numpy as np
import pytest

from dtcup.checks import dtc_input_sampler, dtc_params_sampler
from dtcup.dtc import (
    ABLATION_ROWS,
    AblationSwitches,
    DtcParams,
    ReceptiveField,
    coordinate_gen,
    deformation,
    dtc_backward,
    dtc_forward,
    dtc_forward_state,
    gen_geometry,
    init_dtc,
    receptive_field_to_lambda,
)
from dtcup.gradcheck import check_op
from dtcup.ops import (
    ConvSpec,
    TConvSpec,
    conv_forward,
    grid_sample,
    interp_upsample,
    make_base_grid,
    tconv_forward,
)
from dtcup.rng import SplitMix
from dtcup.tensor import ShapeError, Tensor, tensor


class TestReceptiveField:
    def test_one_pixel_default(self):
        assert receptive_field_to_lambda(ReceptiveField(1.0), 16) == pytest.approx(1 / 16)

    def test_infinite_full_range(self):
        assert receptive_field_to_lambda(ReceptiveField(inf), 7) == 1.0
        assert receptive_field_to_lambda(ReceptiveField(inf), 1000) == 1.0

    def test_direct_formula(self):
        assert receptive_field_to_lambda(ReceptiveField(2.0), 32) == pytest.approx(0.0625)

    def test_capped_at_one(self):
        assert receptive_field_to_lambda(ReceptiveField(100.0), 8) == 1.0

    def test_non_positive_rejected(self):
        with pytest.raises(ValueError):
            ReceptiveField(0.0)
        with pytest.raises(ValueError):
            ReceptiveField(-3.0)

    def test_parse(self):
        assert ReceptiveField.parse("inf").r == inf
        assert ReceptiveField.parse("2.5").r == 2.5
        assert str(ReceptiveField.parse("10")) == "10"


class TestSwitches:
    def test_sigmoid_requires_weight(self):
        with pytest.raises(ValueError):
            AblationSwitches(use_weight=False, use_sigmoid=True, use_tanh=True)

    def test_six_rows(self):
        assert len(ABLATION_ROWS) == 6
        assert len(set(ABLATION_ROWS)) == 6
        assert ABLATION_ROWS[0].label() == "offset"
        assert ABLATION_ROWS[-1].label() == "weight+sigmoid+offset+tanh"


class TestCoordinateGen:
    def _base(self, sp=(4, 4)):
        return make_base_grid(1, sp, len(sp))

    def test_zero_offsets_give_base_grid(self):
        base = self._base()
        zeros = tensor(np.zeros((1, 2, 4, 4)))
        grid = coordinate_gen(zeros, zeros, (0.3, 0.3), base, AblationSwitches())
        np.testing.assert_array_equal(grid.coords.data, base.coords.data)

    def test_saturated_offset_and_weight(self):
        base = self._base((1, 1))
        big = tensor(np.full((1, 2, 1, 1), 50.0))
        grid = coordinate_gen(big, big, (0.1, 0.1), base, AblationSwitches())
        np.testing.assert_allclose(grid.coords.data, 0.1, atol=1e-12)

    def test_zero_lambda_pins_to_base(self):
        base = self._base()
        rng = SplitMix(0, "cg")
        raw = Tensor(rng.uniform_range(-3, 3, 32).reshape(1, 2, 4, 4))
        grid = coordinate_gen(raw, raw, (0.0, 0.0), base, AblationSwitches())
        np.testing.assert_array_equal(grid.coords.data, base.coords.data)

    def test_bounded_deformation_property(self):
        # |coord - base| <= lambda per axis, exactly, pre-clamp, with the
        # tanh/sigmoid switches on.
        rng = SplitMix(3, "bound")
        for trial in range(50):
            lam = tuple(rng.uniform(2))
            off = Tensor(rng.uniform_range(-30, 30, 2 * 36).reshape(1, 2, 6, 6))
            wt = Tensor(rng.uniform_range(-30, 30, 2 * 36).reshape(1, 2, 6, 6))
            delta = deformation(off, wt, lam, AblationSwitches(), 2)
            for a in range(2):
                assert np.abs(delta.data[:, a]).max() <= lam[a]

    def test_lambda_monotone_freedom(self):
        rng = SplitMix(4, "mono")
        off = Tensor(rng.uniform_range(-5, 5, 2 * 16).reshape(1, 2, 4, 4))
        wt = Tensor(rng.uniform_range(-5, 5, 2 * 16).reshape(1, 2, 4, 4))
        d_small = deformation(off, wt, (0.1, 0.1), AblationSwitches(), 2)
        d_large = deformation(off, wt, (0.5, 0.5), AblationSwitches(), 2)
        assert np.abs(d_small.data).max() <= 0.1
        assert np.abs(d_small.data).max() <= np.abs(d_large.data).max() + 1e-15

    def test_clamped_output_range(self):
        base = self._base()
        big = tensor(np.full((1, 2, 4, 4), 100.0))
        grid = coordinate_gen(big, big, (1.0, 1.0), base, AblationSwitches())
        assert np.abs(grid.coords.data).max() <= 1.0

    def test_shape_mismatch(self):
        base = self._base()
        with pytest.raises(ShapeError):
            coordinate_gen(
                tensor(np.zeros((1, 2, 3, 3))),
                tensor(np.zeros((1, 2, 4, 4))),
                (0.1, 0.1),
                base,
                AblationSwitches(),
            )


class TestInitDtc:
    def test_generator_starts_at_zero(self):
        p = init_dtc(3, 3, 2, 2, (8, 8), ReceptiveField(1.0), rng_seed=5)
        assert not p.gen.kernel.data.any()
        assert not p.gen.bias.data.any()

    def test_gen_kernel_shape(self):
        p = init_dtc(1, 1, 2, 2, (8, 8), ReceptiveField(1.0), rng_seed=0)
        assert p.gen.kernel.dims == (1, 4, 4, 4)
        p3 = init_dtc(1, 1, 3, 2, (8, 8, 8), ReceptiveField(1.0), rng_seed=0)
        assert p3.gen.kernel.dims == (1, 6, 4, 4, 4)

    def test_geometry(self):
        assert gen_geometry(1) == (1, 0)
        assert gen_geometry(2) == (4, 1)
        assert gen_geometry(4) == (8, 2)

    def test_same_seed_bit_identical(self):
        a = init_dtc(2, 2, 2, 2, (8, 8), ReceptiveField(1.0), rng_seed=7)
        b = init_dtc(2, 2, 2, 2, (8, 8), ReceptiveField(1.0), rng_seed=7)
        assert a.mix_kernel.data.tobytes() == b.mix_kernel.data.tobytes()

    def test_lambda_per_axis(self):
        p = init_dtc(2, 2, 2, 2, (16, 32), ReceptiveField(1.0), rng_seed=0)
        assert p.lam == (1 / 16, 1 / 32)

    def test_linear_base_channel_constraint(self):
        with pytest.raises(ShapeError, match="M == N"):
            init_dtc(2, 3, 2, 2, (8, 8), ReceptiveField(1.0), rng_seed=0)

    def test_generator_geometry_validated(self):
        p = init_dtc(1, 1, 2, 2, (8, 8), ReceptiveField(1.0), rng_seed=0)
        bad_gen = TConvSpec(p.gen.kernel, (2, 2), (0, 0), bias=p.gen.bias)
        with pytest.raises(ShapeError, match="exact"):
            DtcParams(
                mix_kernel=p.mix_kernel, gen=bad_gen, lam=p.lam, scale=2,
                base=p.base, switches=p.switches,
            )


class TestDtcForward:
    def _identity_mix(self, n, g):
        eye = np.zeros((n, n) + (1,) * g)
        for i in range(n):
            eye[i, i] = 1.0
        return Tensor(eye)

    @pytest.mark.parametrize("g", [2, 3])
    def test_zero_deformation_reduction(self, g):
        sp = (4, 4) if g == 2 else (4, 2, 4)
        n = 2
        rng = SplitMix(0, f"zd{g}")
        x = Tensor(rng.uniform_range(-1, 1, n * int(np.prod(sp))).reshape((1, n) + sp))
        p = init_dtc(n, n, g, 2, sp, ReceptiveField(1.0), rng_seed=3)
        p = DtcParams(
            mix_kernel=self._identity_mix(n, g), gen=p.gen, lam=p.lam, scale=2,
            base=p.base, switches=p.switches,
        )
        out, grid = dtc_forward(x, p)
        base = make_base_grid(1, tuple(2 * s for s in sp), g)
        np.testing.assert_array_equal(grid.coords.data, base.coords.data)
        up = interp_upsample(x, 2)
        np.testing.assert_array_equal(out.data, 2.0 * up.data)

    def test_zero_mix_gives_base_upsampler_only(self):
        sp = (4, 4)
        rng = SplitMix(1, "zm")
        x = Tensor(rng.uniform_range(-1, 1, 2 * 16).reshape(1, 2, 4, 4))
        p = init_dtc(2, 2, 2, 2, sp, ReceptiveField(1.0), rng_seed=3)
        p = DtcParams(
            mix_kernel=Tensor(np.zeros((2, 2, 1, 1))), gen=p.gen, lam=p.lam, scale=2,
            base=p.base, switches=p.switches,
        )
        out, _ = dtc_forward(x, p)
        np.testing.assert_array_equal(out.data, interp_upsample(x, 2).data)

    def test_composition_oracle(self):
        # The unit must equal the step-by-step composition of its five parts.
        g, n, s = 2, 2, 2
        sp = (4, 4)
        rng = SplitMix(2, "comp")
        x = Tensor(rng.uniform_range(-1, 1, n * 16).reshape(1, n, 4, 4))
        p = init_dtc(n, n, g, s, sp, ReceptiveField(2.0), rng_seed=9)
        gen = TConvSpec(
            Tensor(rng.uniform_range(-0.5, 0.5, n * 4 * 16).reshape(n, 4, 4, 4)),
            p.gen.stride, p.gen.padding,
            bias=Tensor(rng.uniform_range(-0.2, 0.2, 4)),
        )
        p = DtcParams(mix_kernel=p.mix_kernel, gen=gen, lam=p.lam, scale=s,
                      base=p.base, switches=p.switches)
        out, grid = dtc_forward(x, p)

        mixed = conv_forward(x, ConvSpec(p.mix_kernel, (1, 1), (0, 0)))
        raw = tconv_forward(x, gen)
        base = make_base_grid(1, (8, 8), 2)
        grid2 = coordinate_gen(
            Tensor(raw.data[:, :2]), Tensor(raw.data[:, 2:]), p.lam, base, p.switches
        )
        sampled = grid_sample(mixed, grid2)
        expected = sampled.data + interp_upsample(x, 2).data
        np.testing.assert_array_equal(grid.coords.data, grid2.coords.data)
        np.testing.assert_allclose(out.data, expected, atol=1e-14)

    def test_tconv_base_channels(self):
        p = init_dtc(2, 3, 2, 2, (4, 4), ReceptiveField(1.0), base_kind="tconv", rng_seed=1)
        x = Tensor(SplitMix(0, "tb").uniform_range(-1, 1, 2 * 16).reshape(1, 2, 4, 4))
        out, _ = dtc_forward(x, p)
        assert out.dims == (1, 3, 8, 8)

    def test_returns_finite_for_all_ablation_rows(self):
        rng = SplitMix(5, "rows")
        x = Tensor(rng.uniform_range(-1, 1, 2 * 16).reshape(1, 2, 4, 4))
        for sw in ABLATION_ROWS:
            p = init_dtc(2, 2, 2, 2, (4, 4), ReceptiveField(1.0), switches=sw, rng_seed=11)
            gen = TConvSpec(
                Tensor(rng.uniform_range(-1, 1, 2 * 4 * 16).reshape(2, 4, 4, 4)),
                p.gen.stride, p.gen.padding, bias=p.gen.bias,
            )
            p = DtcParams(mix_kernel=p.mix_kernel, gen=gen, lam=p.lam, scale=2,
                          base=p.base, switches=sw)
            out, grid = dtc_forward(x, p)
            assert np.isfinite(out.data).all()
            assert np.abs(grid.coords.data).max() <= 1.0


class TestDtcBackward:
    def test_zero_grad_out(self):
        p = init_dtc(2, 2, 2, 2, (4, 4), ReceptiveField(1.0), rng_seed=0)
        x = Tensor(SplitMix(0, "zb").uniform_range(-1, 1, 2 * 16).reshape(1, 2, 4, 4))
        out, state = dtc_forward_state(x, p)
        dg = dtc_backward(x, p, Tensor(np.zeros(out.dims)), state)
        assert not dg.grad_input.data.any()
        assert not dg.grad_mix_kernel.data.any()
        assert not dg.grad_gen_kernel.data.any()

    @pytest.mark.parametrize("g", [2, 3])
    def test_gradients_match_finite_differences(self, g):
        assert check_op(f"dtc{g}.input", dtc_input_sampler(g), 4, 1e-4).passed
        assert check_op(f"dtc{g}.params", dtc_params_sampler(g), 4, 1e-4).passed

    def test_ablation_rows_pass_gradient_checks(self):
        for i, sw in enumerate(ABLATION_ROWS):
            r = check_op(f"dtc.row{i}", dtc_params_sampler(2, sw), 2, 1e-4)
            assert r.passed, f"row {sw.label()}: {r.line()}"

    def test_dead_weight_path_has_zero_gradient(self):
        sw = AblationSwitches(use_weight=False, use_sigmoid=False, use_tanh=True)
        p = init_dtc(2, 2, 2, 2, (4, 4), ReceptiveField(1.0), switches=sw, rng_seed=2)
        x = Tensor(SplitMix(1, "dead").uniform_range(-1, 1, 2 * 16).reshape(1, 2, 4, 4))
        out, state = dtc_forward_state(x, p)
        dg = dtc_backward(x, p, Tensor(np.ones(out.dims)), state)
        # weight channels are the second half of the generator output
        assert not dg.grad_gen_kernel.data[:, 2:].any()
        assert not dg.grad_gen_bias.data[2:].any()
