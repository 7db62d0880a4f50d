"""Miniature encoder-decoder segmentation network with pluggable upsamplers.

Each encoder level is two 3x3(x3) convolutions with max(0, .) nonlinearity
followed by a stride-2 max-pool; each decoder level upsamples by 2, concats
the skip connection, and applies two 3x3 convolutions; a final 1x1
convolution produces the foreground logit.  Channels double per level and
every upsampler variant preserves channel count, so all variants share
identical convolution shapes (and, given the same seed, identical
convolution weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from .dtc import (
    BASE_LINEAR,
    BASE_TCONV,
    AblationSwitches,
    DtcParams,
    ReceptiveField,
    dtc_backward,
    dtc_forward_state,
    gen_geometry,
    init_dtc,
    receptive_field_to_lambda,
)
from .ops import (
    ConvSpec,
    TConvSpec,
    _conv_forward_cols,
    _conv_grads_from_cols,
    conv_backward,
    conv_forward,
    interp_upsample,
    interp_upsample_backward,
    nearest_upsample,
    nearest_upsample_backward,
    tconv_backward,
    tconv_forward,
)
from .rng import SplitMix
from .tensor import ShapeError, Tensor

UPSAMPLER_KINDS = ("nearest", "linear", "tconv", "dtc_over_linear", "dtc_over_tconv")
DTC_KINDS = ("dtc_over_linear", "dtc_over_tconv")


@dataclass(frozen=True)
class UNetConfig:
    spatial_rank: int = 2
    extent: tuple[int, ...] | int = 64
    depth: int = 3
    base_channels: int = 8
    upsampler: str = "linear"
    r: ReceptiveField = ReceptiveField(1.0)
    switches: AblationSwitches = field(default_factory=AblationSwitches)
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.spatial_rank not in (2, 3):
            raise ShapeError(f"spatial rank must be 2 or 3, got {self.spatial_rank}")
        ext = self.extent
        if isinstance(ext, int):
            ext = (ext,) * self.spatial_rank
        object.__setattr__(self, "extent", tuple(int(e) for e in ext))
        if len(self.extent) != self.spatial_rank:
            raise ShapeError(f"extent {self.extent} must have rank {self.spatial_rank}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.upsampler not in UPSAMPLER_KINDS:
            raise ValueError(f"unknown upsampler {self.upsampler!r}, expected one of {UPSAMPLER_KINDS}")
        step = 1 << (self.depth - 1)
        for e in self.extent:
            if e % step != 0 or e // step < 2:
                raise ValueError(
                    f"extent {e} incompatible with depth {self.depth}: "
                    f"each axis must be a multiple of {step} with at least 2 left at the coarsest level"
                )

    def channels(self, level: int) -> int:
        return self.base_channels << level

    def level_extent(self, level: int) -> tuple[int, ...]:
        return tuple(e >> level for e in self.extent)

    @property
    def uses_dtc(self) -> bool:
        return self.upsampler in DTC_KINDS


class UNetParams:
    """Ordered, uniquely named parameter tensors."""

    def __init__(self, entries: list[tuple[str, Tensor]]):
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self._entries = dict(entries)

    def get(self, name: str) -> Tensor:
        return self._entries[name]

    def set(self, name: str, t: Tensor) -> None:
        if name not in self._entries:
            raise KeyError(name)
        self._entries[name] = t

    def items(self):
        return self._entries.items()

    def names(self):
        return list(self._entries)

    def entries(self) -> list[tuple[str, Tensor]]:
        return list(self._entries.items())

    def total_parameters(self) -> int:
        return sum(t.size for _, t in self._entries.items())

    def __contains__(self, name):
        return name in self._entries


def _fan_in_uniform(rng: SplitMix, shape, fan_in: int, dtype) -> Tensor:
    a = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform_range(-a, a, prod(shape)).reshape(shape).astype(dtype))


def _conv_pair_shapes(cfg: UNetConfig):
    """(name, cin, cout) for every 3x3 convolution, in construction order."""
    d = cfg.depth
    out = []
    cin = cfg.in_channels
    for i in range(d - 1):
        c = cfg.channels(i)
        out.append((f"enc{i}.conv1", cin, c))
        out.append((f"enc{i}.conv2", c, c))
        cin = c
    cb = cfg.channels(d - 1)
    out.append(("bot.conv1", cfg.channels(d - 2), cb))
    out.append(("bot.conv2", cb, cb))
    for i in reversed(range(d - 1)):
        c = cfg.channels(i)
        out.append((f"dec{i}.conv1", cfg.channels(i + 1) + c, c))
        out.append((f"dec{i}.conv2", c, c))
    return out


def build_unet(cfg: UNetConfig, seed: int, dtype=np.float64) -> UNetParams:
    """Deterministic initialization: fan-in uniform convolutions, zero biases,
    DTC units zero-initialized to the identity deformation.

    Random streams are keyed by parameter name, so shared layers receive
    identical weights across upsampler variants built from the same seed.
    """
    g = cfg.spatial_rank
    k3 = (3,) * g
    entries: list[tuple[str, Tensor]] = []
    for name, cin, cout in _conv_pair_shapes(cfg):
        w = _fan_in_uniform(SplitMix(seed, name), (cout, cin) + k3, cin * 3**g, dtype)
        entries.append((f"{name}.w", w))
        entries.append((f"{name}.b", Tensor(np.zeros(cout, dtype=dtype))))
    for i in reversed(range(cfg.depth - 1)):
        c = cfg.channels(i + 1)
        prefix = f"dec{i}.up"
        if cfg.upsampler == "tconv":
            kk, _ = gen_geometry(2)
            w = _fan_in_uniform(SplitMix(seed, prefix), (c, c) + (kk,) * g, c * kk**g, dtype)
            entries.append((f"{prefix}.w", w))
            entries.append((f"{prefix}.b", Tensor(np.zeros(c, dtype=dtype))))
        elif cfg.uses_dtc:
            base_kind = BASE_LINEAR if cfg.upsampler == "dtc_over_linear" else BASE_TCONV
            p = init_dtc(
                n=c,
                m=c,
                g=g,
                s=2,
                in_extents=cfg.level_extent(i + 1),
                r=cfg.r,
                base_kind=base_kind,
                switches=cfg.switches,
                rng_seed=seed,
                name=prefix,
                dtype=dtype,
            )
            entries.append((f"{prefix}.mix.w", p.mix_kernel))
            entries.append((f"{prefix}.gen.w", p.gen.kernel))
            entries.append((f"{prefix}.gen.b", p.gen.bias))
            if base_kind == BASE_TCONV:
                entries.append((f"{prefix}.base.w", p.base_spec.kernel))
                entries.append((f"{prefix}.base.b", p.base_spec.bias))
    w = _fan_in_uniform(
        SplitMix(seed, "final"), (cfg.out_channels, cfg.channels(0)) + (1,) * g, cfg.channels(0), dtype
    )
    entries.append(("final.w", w))
    entries.append(("final.b", Tensor(np.zeros(cfg.out_channels, dtype=dtype))))
    return UNetParams(entries)


# ---------------------------------------------------------------------------
# Structural pieces: conv+relu blocks, max-pool, upsamplers
# ---------------------------------------------------------------------------


def _conv_spec(params: UNetParams, name: str, g: int, pad: int) -> ConvSpec:
    return ConvSpec(params.get(f"{name}.w"), (1,) * g, (pad,) * g, bias=params.get(f"{name}.b"))


def _relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0.0))


def _block_forward(params: UNetParams, prefix: str, x: Tensor, g: int):
    s1 = _conv_spec(params, f"{prefix}.conv1", g, 1)
    y1, cols1 = _conv_forward_cols(x, s1)
    r1 = _relu(y1)
    s2 = _conv_spec(params, f"{prefix}.conv2", g, 1)
    y2, cols2 = _conv_forward_cols(r1, s2)
    r2 = _relu(y2)
    return r2, (x, s1, y1, cols1, r1, s2, y2, cols2)


def _block_backward(prefix, ctx, grad: Tensor, grads: dict, g: int) -> Tensor:
    x, s1, y1, cols1, r1, s2, y2, cols2 = ctx
    sum_axes = (0,) + tuple(range(2, g + 2))
    gy2 = Tensor(grad.data * (y2.data > 0))
    gr1, gw2 = _conv_grads_from_cols(r1, s2, gy2, cols2)
    grads[f"{prefix}.conv2.w"] = _acc(grads.get(f"{prefix}.conv2.w"), gw2)
    grads[f"{prefix}.conv2.b"] = _acc(grads.get(f"{prefix}.conv2.b"), Tensor(gy2.data.sum(axis=sum_axes)))
    gy1 = Tensor(gr1.data * (y1.data > 0))
    gx, gw1 = _conv_grads_from_cols(x, s1, gy1, cols1)
    grads[f"{prefix}.conv1.w"] = _acc(grads.get(f"{prefix}.conv1.w"), gw1)
    grads[f"{prefix}.conv1.b"] = _acc(grads.get(f"{prefix}.conv1.b"), Tensor(gy1.data.sum(axis=sum_axes)))
    return gx


def _acc(existing: Tensor | None, new: Tensor) -> Tensor:
    return new if existing is None else Tensor(existing.data + new.data)


def _pool_perm(g: int):
    return [0, 1] + [2 + 2 * a for a in range(g)] + [3 + 2 * a for a in range(g)]


def _maxpool_forward(x: Tensor, g: int):
    b, c = x.dims[:2]
    sp = x.dims[2:]
    shape = [b, c]
    for s in sp:
        shape.extend([s // 2, 2])
    perm = _pool_perm(g)
    win = x.data.reshape(shape).transpose(perm)
    half = tuple(s // 2 for s in sp)
    win = win.reshape((b, c) + half + (2**g,))
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return Tensor(out), (idx, x.dims)


def _maxpool_backward(ctx, grad: Tensor, g: int) -> Tensor:
    idx, in_dims = ctx
    b, c = in_dims[:2]
    sp = in_dims[2:]
    half = tuple(s // 2 for s in sp)
    win = np.zeros((b, c) + half + (2**g,), dtype=grad.data.dtype)
    np.put_along_axis(win, idx[..., None], grad.data[..., None], axis=-1)
    win = win.reshape((b, c) + half + (2,) * g)
    perm = _pool_perm(g)
    inv = np.argsort(perm)
    out = win.transpose(inv).reshape(in_dims)
    return Tensor(out)


def _dtc_unit(params: UNetParams, cfg: UNetConfig, level: int) -> DtcParams:
    g = cfg.spatial_rank
    prefix = f"dec{level}.up"
    _, pd = gen_geometry(2)
    gen = TConvSpec(
        params.get(f"{prefix}.gen.w"), (2,) * g, (pd,) * g, bias=params.get(f"{prefix}.gen.b")
    )
    base_kind = BASE_LINEAR if cfg.upsampler == "dtc_over_linear" else BASE_TCONV
    base_spec = None
    if base_kind == BASE_TCONV:
        base_spec = TConvSpec(
            params.get(f"{prefix}.base.w"), (2,) * g, (pd,) * g, bias=params.get(f"{prefix}.base.b")
        )
    lam = tuple(receptive_field_to_lambda(cfg.r, e) for e in cfg.level_extent(level + 1))
    return DtcParams(
        mix_kernel=params.get(f"{prefix}.mix.w"),
        gen=gen,
        lam=lam,
        scale=2,
        base=base_kind,
        base_spec=base_spec,
        switches=cfg.switches,
    )


def _up_forward(params: UNetParams, cfg: UNetConfig, level: int, x: Tensor):
    g = cfg.spatial_rank
    kind = cfg.upsampler
    if kind == "nearest":
        return nearest_upsample(x, 2), (x, None)
    if kind == "linear":
        return interp_upsample(x, 2), (x, None)
    if kind == "tconv":
        prefix = f"dec{level}.up"
        _, pd = gen_geometry(2)
        spec = TConvSpec(
            params.get(f"{prefix}.w"), (2,) * g, (pd,) * g, bias=params.get(f"{prefix}.b")
        )
        return tconv_forward(x, spec), (x, spec)
    p = _dtc_unit(params, cfg, level)
    out, state = dtc_forward_state(x, p)
    return out, (x, (p, state))


def _up_backward(cfg: UNetConfig, level: int, ctx, grad: Tensor, grads: dict) -> Tensor:
    g = cfg.spatial_rank
    kind = cfg.upsampler
    x, extra = ctx
    sum_axes = (0,) + tuple(range(2, g + 2))
    if kind == "nearest":
        return nearest_upsample_backward(x, 2, grad)
    if kind == "linear":
        return interp_upsample_backward(x, 2, grad)
    prefix = f"dec{level}.up"
    if kind == "tconv":
        gx, gw = tconv_backward(x, extra, grad)
        grads[f"{prefix}.w"] = _acc(grads.get(f"{prefix}.w"), gw)
        grads[f"{prefix}.b"] = _acc(grads.get(f"{prefix}.b"), Tensor(grad.data.sum(axis=sum_axes)))
        return gx
    p, state = extra
    dg = dtc_backward(x, p, grad, state)
    grads[f"{prefix}.mix.w"] = _acc(grads.get(f"{prefix}.mix.w"), dg.grad_mix_kernel)
    grads[f"{prefix}.gen.w"] = _acc(grads.get(f"{prefix}.gen.w"), dg.grad_gen_kernel)
    grads[f"{prefix}.gen.b"] = _acc(grads.get(f"{prefix}.gen.b"), dg.grad_gen_bias)
    if dg.grad_base_kernel is not None:
        grads[f"{prefix}.base.w"] = _acc(grads.get(f"{prefix}.base.w"), dg.grad_base_kernel)
        grads[f"{prefix}.base.b"] = _acc(grads.get(f"{prefix}.base.b"), dg.grad_base_bias)
    return dg.grad_input


# ---------------------------------------------------------------------------
# Whole-network forward / backward
# ---------------------------------------------------------------------------


def _check_input(cfg: UNetConfig, x: Tensor) -> None:
    expected = (x.dims[0], cfg.in_channels) + cfg.extent
    if len(x.dims) != cfg.spatial_rank + 2 or x.dims[1:] != expected[1:]:
        raise ShapeError(f"input {x.dims} does not match configured shape [B, {cfg.in_channels}, {cfg.extent}]")


def _forward_tape(params: UNetParams, cfg: UNetConfig, x: Tensor):
    g = cfg.spatial_rank
    d = cfg.depth
    enc_ctx = []
    pool_ctx = []
    skips = []
    cur = x
    for i in range(d - 1):
        cur, bctx = _block_forward(params, f"enc{i}", cur, g)
        enc_ctx.append(bctx)
        skips.append(cur)
        cur, pctx = _maxpool_forward(cur, g)
        pool_ctx.append(pctx)
    cur, bot_ctx = _block_forward(params, "bot", cur, g)
    dec_ctx = []
    for i in reversed(range(d - 1)):
        up, uctx = _up_forward(params, cfg, i, cur)
        cat = Tensor(np.concatenate([up.data, skips[i].data], axis=1))
        cur, bctx = _block_forward(params, f"dec{i}", cat, g)
        dec_ctx.append((i, uctx, up.dims[1], bctx))
    final_spec = _conv_spec(params, "final", g, 0)
    logits = conv_forward(cur, final_spec)
    tape = (enc_ctx, pool_ctx, bot_ctx, dec_ctx, cur, final_spec)
    return logits, tape


def _backward_tape(params: UNetParams, cfg: UNetConfig, tape, grad_logits: Tensor) -> dict:
    g = cfg.spatial_rank
    d = cfg.depth
    enc_ctx, pool_ctx, bot_ctx, dec_ctx, pre_final, final_spec = tape
    grads: dict[str, Tensor] = {}
    sum_axes = (0,) + tuple(range(2, g + 2))
    grad, gw = conv_backward(pre_final, final_spec, grad_logits)
    grads["final.w"] = gw
    grads["final.b"] = Tensor(grad_logits.data.sum(axis=sum_axes))
    skip_grads: dict[int, Tensor] = {}
    for i, uctx, c_up, bctx in reversed(dec_ctx):
        gcat = _block_backward(f"dec{i}", bctx, grad, grads, g)
        g_up = Tensor(gcat.data[:, :c_up])
        skip_grads[i] = Tensor(np.ascontiguousarray(gcat.data[:, c_up:]))
        grad = _up_backward(cfg, i, uctx, g_up, grads)
    grad = _block_backward("bot", bot_ctx, grad, grads, g)
    for i in reversed(range(d - 1)):
        grad = _maxpool_backward(pool_ctx[i], grad, g)
        grad = Tensor(grad.data + skip_grads[i].data)
        grad = _block_backward(f"enc{i}", enc_ctx[i], grad, grads, g)
    return grads


def unet_forward(params: UNetParams, cfg: UNetConfig, x: Tensor) -> Tensor:
    """Segmentation logits with the same spatial shape as the input."""
    _check_input(cfg, x)
    logits, _ = _forward_tape(params, cfg, x)
    return logits


def unet_forward_grids(params: UNetParams, cfg: UNetConfig, x: Tensor):
    """Forward pass that also returns each DTC level's sampling grid."""
    _check_input(cfg, x)
    logits, tape = _forward_tape(params, cfg, x)
    grids = {}
    if cfg.uses_dtc:
        for i, uctx, _, _ in tape[3]:
            grids[i] = uctx[1][1].grid
    return logits, grids


def unet_backward(params: UNetParams, cfg: UNetConfig, x: Tensor, grad_logits: Tensor) -> UNetParams:
    """Gradients for every parameter, returned under the parameter names."""
    _check_input(cfg, x)
    logits, tape = _forward_tape(params, cfg, x)
    if grad_logits.dims != logits.dims:
        raise ShapeError(f"grad_logits {grad_logits.dims} does not match logits {logits.dims}")
    grads = _backward_tape(params, cfg, tape, grad_logits)
    return UNetParams([(name, grads[name]) for name, _ in params.items()])


# ---------------------------------------------------------------------------
# Parameter / mult-add accounting
# ---------------------------------------------------------------------------


def _conv_cost(cin, cout, k_elems, out_elems):
    # out_elems already includes the output channel count
    return cin * cout * k_elems + cout, out_elems * cin * k_elems


def _sample_cost(out_elems, g):
    return out_elems * (2**g) * (g + 1)


def count_params_flops(cfg: UNetConfig) -> tuple[int, int]:
    """Analytic parameter and mult-add counts for batch size 1.

    Convolution mult-adds are output elements x Cin x kernel taps; a
    transposed convolution is the adjoint form (input elements x Cout x
    taps); grid sampling costs 2^g taps x (g + 1) mult-adds per output
    element; pooling, nonlinearity, and addition are not counted.
    """
    g = cfg.spatial_rank
    k3 = 3**g
    params = 0
    madds = 0
    for name, cin, cout in _conv_pair_shapes(cfg):
        stage = name.split(".")[0]
        level = cfg.depth - 1 if stage == "bot" else int(stage[3:])
        sp = prod(cfg.level_extent(level))
        p, m = _conv_cost(cin, cout, k3, sp * cout)
        params += p
        madds += m
    kup, _ = gen_geometry(2)
    kup_elems = kup**g
    for i in range(cfg.depth - 1):
        c = cfg.channels(i + 1)
        sp_in = prod(cfg.level_extent(i + 1))
        sp_out = prod(cfg.level_extent(i))
        if cfg.upsampler == "nearest":
            pass
        elif cfg.upsampler == "linear":
            madds += _sample_cost(sp_out * c, g)
        elif cfg.upsampler == "tconv":
            params += c * c * kup_elems + c
            madds += sp_in * c * c * kup_elems
        else:
            params += c * c  # 1x1 mix, no bias
            madds += sp_in * c * c
            params += c * 2 * g * kup_elems + 2 * g
            madds += sp_in * c * 2 * g * kup_elems
            madds += _sample_cost(sp_out * c, g)
            if cfg.upsampler == "dtc_over_linear":
                madds += _sample_cost(sp_out * c, g)
            else:
                params += c * c * kup_elems + c
                madds += sp_in * c * c * kup_elems
    params += cfg.channels(0) * cfg.out_channels + cfg.out_channels
    madds += prod(cfg.extent) * cfg.out_channels * cfg.channels(0)
    return params, madds
