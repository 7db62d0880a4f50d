"""Registered gradient checks: one sampler per certified backward path.

Each sampler builds a randomized small instance, a scalar function of one
tensor argument (a fixed random projection of the operation output), and
the analytic gradient of that scalar.  Samplers keep instances away from
the non-smooth points of their operation (interpolation kinks, clamp
boundaries, rectifier and pooling ties) so central differences are valid.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from .dtc import (
    ABLATION_ROWS,
    AblationSwitches,
    DtcParams,
    ReceptiveField,
    coordinate_gen,
    coordinate_gen_backward,
    deformation,
    dtc_backward,
    dtc_forward_state,
    init_dtc,
)
from .gradcheck import KINK_MARGIN, GradCheckReport, Sampler, check_op, safe_grid_coords
from .ops import (
    ConvSpec,
    SampleGrid,
    TConvSpec,
    conv_backward,
    conv_forward,
    grid_sample,
    grid_sample_backward,
    make_base_grid,
    tconv_backward,
    tconv_forward,
)
from .rng import SplitMix
from .tensor import Tensor
from .train import soft_dice_loss
from .unet import UNetConfig, UNetParams, _backward_tape, _forward_tape, build_unet


@dataclass(frozen=True)
class RegisteredCheck:
    name: str
    sampler: Sampler
    tol_rel: float
    trials: int = 20


def _rand(rng: SplitMix, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform_range(lo, hi, prod(shape)).reshape(shape))


def _projection(rng: SplitMix, shape) -> Tensor:
    return _rand(rng, shape)


def _dot(a: Tensor, b: Tensor) -> float:
    return float((a.data * b.data).sum())


# ---------------------------------------------------------------------------
# conv / tconv
# ---------------------------------------------------------------------------


def _conv_instance(rng: SplitMix, g: int):
    b = 1 + int(rng.integers(2)[0])
    cin = 1 + int(rng.integers(2)[0])
    cout = 1 + int(rng.integers(2)[0])
    k = 1 + int(rng.integers(3 if g == 2 else 2)[0])
    stride = 1 + int(rng.integers(2)[0])
    pad = int(rng.integers(2)[0])
    sp = tuple(k + int(v) for v in rng.integers(3, g))
    x = _rand(rng, (b, cin) + sp)
    kernel = _rand(rng, (cout, cin) + (k,) * g)
    spec = ConvSpec(kernel, (stride,) * g, (pad,) * g)
    return x, spec


def conv_input_sampler(g: int) -> Sampler:
    def sampler(rng):
        x, spec = _conv_instance(rng, g)
        proj = _projection(rng, conv_forward(x, spec).dims)
        f = lambda xt: _dot(proj, conv_forward(xt, spec))
        analytic = conv_backward(x, spec, proj)[0]
        return f, x, analytic

    return sampler


def conv_kernel_sampler(g: int) -> Sampler:
    def sampler(rng):
        x, spec = _conv_instance(rng, g)
        proj = _projection(rng, conv_forward(x, spec).dims)
        f = lambda kt: _dot(proj, conv_forward(x, ConvSpec(kt, spec.stride, spec.padding)))
        analytic = conv_backward(x, spec, proj)[1]
        return f, spec.kernel, analytic

    return sampler


def _tconv_instance(rng: SplitMix, g: int):
    b = 1 + int(rng.integers(2)[0])
    cin = 1 + int(rng.integers(2)[0])
    cout = 1 + int(rng.integers(2)[0])
    k = 2 + int(rng.integers(3 if g == 2 else 2)[0])
    stride = 1 + int(rng.integers(2)[0])
    pad = int(rng.integers(2)[0]) if k >= 3 else 0
    sp = tuple(2 + int(v) for v in rng.integers(3, g))
    x = _rand(rng, (b, cin) + sp)
    kernel = _rand(rng, (cin, cout) + (k,) * g)
    spec = TConvSpec(kernel, (stride,) * g, (pad,) * g)
    return x, spec


def tconv_input_sampler(g: int) -> Sampler:
    def sampler(rng):
        x, spec = _tconv_instance(rng, g)
        proj = _projection(rng, tconv_forward(x, spec).dims)
        f = lambda xt: _dot(proj, tconv_forward(xt, spec))
        analytic = tconv_backward(x, spec, proj)[0]
        return f, x, analytic

    return sampler


def tconv_kernel_sampler(g: int) -> Sampler:
    def sampler(rng):
        x, spec = _tconv_instance(rng, g)
        proj = _projection(rng, tconv_forward(x, spec).dims)
        f = lambda kt: _dot(proj, tconv_forward(x, TConvSpec(kt, spec.stride, spec.padding)))
        analytic = tconv_backward(x, spec, proj)[1]
        return f, spec.kernel, analytic

    return sampler


# ---------------------------------------------------------------------------
# grid sampling
# ---------------------------------------------------------------------------


def _grid_instance(rng: SplitMix, g: int):
    b = 1 + int(rng.integers(2)[0])
    c = 1 + int(rng.integers(2)[0])
    in_sp = tuple(3 + int(v) for v in rng.integers(3, g))
    out_sp = tuple(2 + int(v) for v in rng.integers(2, g))
    x = _rand(rng, (b, c) + in_sp)
    n = b * prod(out_sp)
    axes = [safe_grid_coords(rng, in_sp[a], n) for a in range(g)]
    coords = np.stack(axes, axis=-1).reshape((b,) + out_sp + (g,))
    grid = SampleGrid(Tensor(coords))
    return x, grid


def grid_sample_input_sampler(g: int) -> Sampler:
    def sampler(rng):
        x, grid = _grid_instance(rng, g)
        proj = _projection(rng, grid_sample(x, grid).dims)
        f = lambda xt: _dot(proj, grid_sample(xt, grid))
        analytic = grid_sample_backward(x, grid, proj)[0]
        return f, x, analytic

    return sampler


def grid_sample_grid_sampler(g: int) -> Sampler:
    def sampler(rng):
        x, grid = _grid_instance(rng, g)
        proj = _projection(rng, grid_sample(x, grid).dims)
        f = lambda ct: _dot(proj, grid_sample(x, SampleGrid(ct)))
        analytic = grid_sample_backward(x, grid, proj)[1]
        return f, grid.coords, analytic

    return sampler


# ---------------------------------------------------------------------------
# coordinate generation
# ---------------------------------------------------------------------------


def _coordgen_instance(rng: SplitMix, g: int):
    # lambda small and raws bounded so no coordinate comes near the +/-1
    # clamp, keeping the instance away from the clamp kink.
    b = 1
    out_sp = (8,) * g
    offset_raw = _rand(rng, (b, g) + out_sp)
    weight_raw = _rand(rng, (b, g) + out_sp)
    lam = tuple(float(v) for v in rng.uniform_range(0.01, 0.05, g))
    switches = ABLATION_ROWS[int(rng.integers(len(ABLATION_ROWS))[0])]
    base = make_base_grid(b, out_sp, g)
    return offset_raw, weight_raw, lam, base, switches


def coordgen_offset_sampler(g: int) -> Sampler:
    def sampler(rng):
        offset_raw, weight_raw, lam, base, switches = _coordgen_instance(rng, g)
        proj = _projection(rng, base.coords.dims)
        f = lambda ot: _dot(proj, coordinate_gen(ot, weight_raw, lam, base, switches).coords)
        analytic = coordinate_gen_backward(offset_raw, weight_raw, lam, base, switches, proj)[0]
        return f, offset_raw, analytic

    return sampler


def coordgen_weight_sampler(g: int) -> Sampler:
    def sampler(rng):
        offset_raw, weight_raw, lam, base, switches = _coordgen_instance(rng, g)
        proj = _projection(rng, base.coords.dims)
        f = lambda wt: _dot(proj, coordinate_gen(offset_raw, wt, lam, base, switches).coords)
        analytic = coordinate_gen_backward(offset_raw, weight_raw, lam, base, switches, proj)[1]
        return f, weight_raw, analytic

    return sampler


# ---------------------------------------------------------------------------
# composed DTC unit
# ---------------------------------------------------------------------------


def _grid_margins_ok(p: DtcParams, state, in_sp) -> bool:
    """True when every generated coordinate is safely differentiable:
    interior with the continuous index away from texel centers, or clamped
    with margin to spare."""
    coords = state.grid.coords.data
    g = coords.shape[-1]
    delta = deformation(state.offset_raw, state.weight_raw, p.lam, p.switches, g)
    moved = state.base_grid.coords.data + np.moveaxis(delta.data, 1, -1)
    if (np.abs(np.abs(moved) - 1.0) < KINK_MARGIN).any():
        return False
    for a, s in enumerate(in_sp):
        u = ((coords[..., a] + 1.0) * s - 1.0) / 2.0
        clamped_safe = (u < -KINK_MARGIN) | (u > s - 1 + KINK_MARGIN)
        frac = u - np.floor(u)
        interior_safe = (
            (u > KINK_MARGIN)
            & (u < s - 1 - KINK_MARGIN)
            & (frac > KINK_MARGIN)
            & (frac < 1.0 - KINK_MARGIN)
        )
        if not (clamped_safe | interior_safe).all():
            return False
    return True


def _dtc_instance(rng: SplitMix, g: int, switches: AblationSwitches | None = None):
    n = 2 if g == 2 else 1
    sp = (3, 4) if g == 2 else (2, 3, 2)
    s = 2
    for _ in range(64):
        x = _rand(rng, (1, n) + sp)
        p = init_dtc(
            n=n, m=n, g=g, s=s, in_extents=sp, r=ReceptiveField(1.0),
            switches=switches or AblationSwitches(),
            rng_seed=int(rng.integers(1 << 30)[0]),
        )
        gen_kernel = _rand(rng, p.gen.kernel.dims, -0.5, 0.5)
        gen_bias = _rand(rng, p.gen.bias.dims, -0.3, 0.3)
        p = DtcParams(
            mix_kernel=p.mix_kernel,
            gen=TConvSpec(gen_kernel, p.gen.stride, p.gen.padding, bias=gen_bias),
            lam=p.lam,
            scale=s,
            base=p.base,
            switches=p.switches,
        )
        out, state = dtc_forward_state(x, p)
        if _grid_margins_ok(p, state, sp):
            return x, p, out, state
    raise RuntimeError("could not sample a kink-free DTC instance")


def _flatten_dtc_params(p: DtcParams) -> Tensor:
    return Tensor(
        np.concatenate(
            [p.mix_kernel.data.ravel(), p.gen.kernel.data.ravel(), p.gen.bias.data.ravel()]
        )
    )


def _unflatten_dtc_params(p: DtcParams, flat: Tensor) -> DtcParams:
    v = flat.data
    nm = p.mix_kernel.size
    ng = p.gen.kernel.size
    mix = Tensor(v[:nm].reshape(p.mix_kernel.dims))
    genk = Tensor(v[nm : nm + ng].reshape(p.gen.kernel.dims))
    genb = Tensor(v[nm + ng :].reshape(p.gen.bias.dims))
    return DtcParams(
        mix_kernel=mix,
        gen=TConvSpec(genk, p.gen.stride, p.gen.padding, bias=genb),
        lam=p.lam,
        scale=p.scale,
        base=p.base,
        switches=p.switches,
    )


def dtc_input_sampler(g: int, switches: AblationSwitches | None = None) -> Sampler:
    def sampler(rng):
        x, p, out, state = _dtc_instance(rng, g, switches)
        proj = _projection(rng, out.dims)
        f = lambda xt: _dot(proj, dtc_forward_state(xt, p)[0])
        analytic = dtc_backward(x, p, proj, state).grad_input
        return f, x, analytic

    return sampler


def dtc_params_sampler(g: int, switches: AblationSwitches | None = None) -> Sampler:
    def sampler(rng):
        x, p, out, state = _dtc_instance(rng, g, switches)
        proj = _projection(rng, out.dims)

        def f(flat: Tensor) -> float:
            return _dot(proj, dtc_forward_state(x, _unflatten_dtc_params(p, flat))[0])

        dg = dtc_backward(x, p, proj, state)
        analytic = Tensor(
            np.concatenate(
                [
                    dg.grad_mix_kernel.data.ravel(),
                    dg.grad_gen_kernel.data.ravel(),
                    dg.grad_gen_bias.data.ravel(),
                ]
            )
        )
        return f, _flatten_dtc_params(p), analytic

    return sampler


# ---------------------------------------------------------------------------
# soft Dice loss
# ---------------------------------------------------------------------------


def soft_dice_sampler(rng: SplitMix):
    logits = _rand(rng, (2, 1, 4, 4), -2.0, 2.0)
    target = Tensor((rng.uniform(32) > 0.5).astype(np.float64).reshape(2, 1, 4, 4))
    f = lambda lt: soft_dice_loss(lt, target)[0]
    analytic = soft_dice_loss(logits, target)[1]
    return f, logits, analytic


# ---------------------------------------------------------------------------
# tiny full network
# ---------------------------------------------------------------------------

TINY_UNET = UNetConfig(
    spatial_rank=2, extent=8, depth=2, base_channels=2, upsampler="dtc_over_linear",
    r=ReceptiveField(1.0),
)


def _flatten_params(params: UNetParams) -> Tensor:
    return Tensor(np.concatenate([t.data.ravel() for _, t in params.items()]))


def _unflatten_params(params: UNetParams, flat: Tensor) -> UNetParams:
    v = flat.data
    entries = []
    pos = 0
    for name, t in params.items():
        entries.append((name, Tensor(v[pos : pos + t.size].reshape(t.dims))))
        pos += t.size
    return UNetParams(entries)


def _unet_margins_ok(cfg: UNetConfig, tape) -> bool:
    """Reject instances with a pre-activation near the rectifier kink, a
    pooling window nearly tied between two positive values, or a DTC grid
    coordinate near an interpolation kink."""
    enc_ctx, pool_ctx, bot_ctx, dec_ctx, _, _ = tape
    blocks = list(enc_ctx) + [bot_ctx] + [b for _, _, _, b in dec_ctx]
    # 5x the reach of a 1e-5 central difference through unit-scale activations
    margin = 5e-5
    for ctx in blocks:
        y1, y2 = ctx[2], ctx[6]
        if np.abs(y1.data).min() < margin or np.abs(y2.data).min() < margin:
            return False
    g = cfg.spatial_rank
    for i, ctx in enumerate(pool_ctx):
        r2 = np.maximum(blocks[i][6].data, 0.0)
        b, c = r2.shape[:2]
        shape = [b, c]
        for s in r2.shape[2:]:
            shape.extend([s // 2, 2])
        perm = [0, 1] + [2 + 2 * a for a in range(g)] + [3 + 2 * a for a in range(g)]
        win = r2.reshape(shape).transpose(perm).reshape(b, c, -1, 2**g)
        top2 = np.partition(win, -2, axis=-1)[..., -2:]
        gap = top2[..., 1] - top2[..., 0]
        risky = (top2[..., 1] > 0) & (gap < margin)
        if risky.any():
            return False
    if cfg.uses_dtc:
        for level, uctx, _, _ in dec_ctx:
            p, state = uctx[1]
            if not _grid_margins_ok(p, state, cfg.level_extent(level + 1)):
                return False
    return True


def _jitter_params(params: UNetParams, rng: SplitMix, scale: float = 0.02) -> UNetParams:
    # Zero biases leave dead rectifier windows sitting exactly on the kink;
    # a small jitter on every parameter moves the instance to a generic point.
    entries = []
    for name, t in params.items():
        noise = rng.uniform_range(-scale, scale, t.size).reshape(t.dims)
        entries.append((name, Tensor(t.data + noise)))
    return UNetParams(entries)


def unet_params_sampler(cfg: UNetConfig = TINY_UNET) -> Sampler:
    def sampler(rng):
        for _ in range(64):
            seed = int(rng.integers(1 << 30)[0])
            params = _jitter_params(build_unet(cfg, seed), rng)
            x = _rand(rng, (1, cfg.in_channels) + cfg.extent, 0.0, 1.0)
            logits, tape = _forward_tape(params, cfg, x)
            if _unet_margins_ok(cfg, tape):
                break
        else:
            raise RuntimeError("could not sample a kink-free network instance")
        proj = _projection(rng, logits.dims)

        def f(flat: Tensor) -> float:
            p = _unflatten_params(params, flat)
            return _dot(proj, _forward_tape(p, cfg, x)[0])

        grads = _backward_tape(params, cfg, tape, proj)
        analytic = Tensor(np.concatenate([grads[name].data.ravel() for name, _ in params.items()]))
        return f, _flatten_params(params), analytic

    return sampler


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-4


def standard_checks() -> list[RegisteredCheck]:
    checks = []
    for g in (2, 3):
        checks.append(RegisteredCheck(f"conv{g}d.input", conv_input_sampler(g), PRIMITIVE_TOL))
        checks.append(RegisteredCheck(f"conv{g}d.kernel", conv_kernel_sampler(g), PRIMITIVE_TOL))
        checks.append(RegisteredCheck(f"tconv{g}d.input", tconv_input_sampler(g), PRIMITIVE_TOL))
        checks.append(RegisteredCheck(f"tconv{g}d.kernel", tconv_kernel_sampler(g), PRIMITIVE_TOL))
        checks.append(
            RegisteredCheck(f"grid_sample{g}d.input", grid_sample_input_sampler(g), PRIMITIVE_TOL)
        )
        checks.append(
            RegisteredCheck(f"grid_sample{g}d.grid", grid_sample_grid_sampler(g), PRIMITIVE_TOL)
        )
        checks.append(
            RegisteredCheck(f"coordinate_gen{g}d.offset", coordgen_offset_sampler(g), PRIMITIVE_TOL)
        )
        checks.append(
            RegisteredCheck(f"coordinate_gen{g}d.weight", coordgen_weight_sampler(g), PRIMITIVE_TOL)
        )
        checks.append(RegisteredCheck(f"dtc{g}d.input", dtc_input_sampler(g), COMPOSITE_TOL))
        checks.append(RegisteredCheck(f"dtc{g}d.params", dtc_params_sampler(g), COMPOSITE_TOL))
    checks.append(RegisteredCheck("soft_dice.logits", soft_dice_sampler, PRIMITIVE_TOL))
    checks.append(RegisteredCheck("unet.params", unet_params_sampler(), COMPOSITE_TOL))
    return checks


def run_checks(
    ops_filter: list[str] | None = None,
    trials: int | None = None,
    tol_rel: float | None = None,
    seed: int = 0,
    inject_failure: bool = False,
) -> list[GradCheckReport]:
    checks = standard_checks()
    if ops_filter:
        checks = [c for c in checks if any(c.name.startswith(f) for f in ops_filter)]
    reports = []
    for c in checks:
        reports.append(
            check_op(
                c.name,
                c.sampler,
                trials or c.trials,
                tol_rel if tol_rel is not None else c.tol_rel,
                seed=seed,
            )
        )
    if inject_failure:
        def bad_sampler(rng):
            f, x, analytic = conv_input_sampler(2)(rng)
            return f, x, Tensor(-analytic.data)

        reports.append(check_op("injected.wrong_sign", bad_sampler, 1, PRIMITIVE_TOL, seed=seed))
    return reports
