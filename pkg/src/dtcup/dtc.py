"""Deformable transposed convolution (DTC) upsampling unit.

The unit combines four pieces, all operating on [B, N, spatial] inputs:

* a 1x1 channel-mixing convolution N -> M (spatial size unchanged);
* an offset/weight generator: a transposed convolution producing 2g
  channels at s-times resolution (g offset channels, then g weight
  channels, in spatial axis order);
* coordinate generation: per axis a,
      coord_a = clamp(lambda_a * Offset_a * Weight_a + base_a, -1, 1)
  where Offset = tanh(offset_raw) and Weight = sigmoid(weight_raw) under
  the default switches and base is the regular output-pixel-center grid;
* grid sampling of the mixed features at the generated coordinates, summed
  with a base upsampler (linear interpolation or a transposed convolution)
  applied to the raw input.

lambda bounds how far a sampling coordinate may move: with the default
receptive-field parameter r = 1 it equals one pixel width of the input
map, lambda = 1 / extent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import inf, prod, sqrt

import numpy as np

from .ops import (
    ConvSpec,
    SampleGrid,
    TConvSpec,
    conv_backward,
    conv_forward,
    grid_sample,
    grid_sample_backward,
    interp_upsample,
    interp_upsample_backward,
    make_base_grid,
    tconv_backward,
    tconv_forward,
)
from .rng import SplitMix
from .tensor import (
    Shape,
    ShapeError,
    Tensor,
    activation_sigmoid,
    activation_tanh,
    ew_add,
    sigmoid_derivative,
    tanh_derivative,
)

BASE_LINEAR = "linear"
BASE_TCONV = "tconv"


@dataclass(frozen=True)
class AblationSwitches:
    """Which parts of coordinate generation are active.

    The offset path is always present; sigmoid gating requires the weight
    path to exist.
    """

    use_weight: bool = True
    use_sigmoid: bool = True
    use_tanh: bool = True

    def __post_init__(self):
        if self.use_sigmoid and not self.use_weight:
            raise ValueError("use_sigmoid requires use_weight")

    def label(self) -> str:
        parts = []
        if self.use_weight:
            parts.append("weight")
        if self.use_sigmoid:
            parts.append("sigmoid")
        parts.append("offset")
        if self.use_tanh:
            parts.append("tanh")
        return "+".join(parts)


#: The six reachable switch settings, offset-only first, everything-on last.
ABLATION_ROWS: tuple[AblationSwitches, ...] = (
    AblationSwitches(use_weight=False, use_sigmoid=False, use_tanh=False),
    AblationSwitches(use_weight=False, use_sigmoid=False, use_tanh=True),
    AblationSwitches(use_weight=True, use_sigmoid=False, use_tanh=False),
    AblationSwitches(use_weight=True, use_sigmoid=False, use_tanh=True),
    AblationSwitches(use_weight=True, use_sigmoid=True, use_tanh=False),
    AblationSwitches(use_weight=True, use_sigmoid=True, use_tanh=True),
)


@dataclass(frozen=True)
class ReceptiveField:
    """Maximum coordinate travel in input pixels; math.inf = unrestricted."""

    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"receptive field must be positive, got {self.r}")

    @classmethod
    def parse(cls, text: str) -> "ReceptiveField":
        return cls(inf if text.strip().lower() in ("inf", "infinite") else float(text))

    def __str__(self):
        return "inf" if self.r == inf else f"{self.r:g}"


def receptive_field_to_lambda(r: ReceptiveField, in_extent: int) -> float:
    """Displacement bound for one axis: min(1, r / extent); 1 when r is inf.

    r = 1 gives one pixel width of the input feature map.
    """
    if in_extent < 1:
        raise ValueError(f"in_extent must be >= 1, got {in_extent}")
    if r.r == inf:
        return 1.0
    return min(1.0, r.r / in_extent)


@dataclass(frozen=True)
class DtcParams:
    """All parameters of one DTC unit.

    mix_kernel is the 1x1 channel-mixing convolution [M, N, 1(,1,1)];
    gen produces 2g channels at s-times resolution (offsets then weights);
    lam holds the per-axis displacement bound in [0, 1]; base selects the
    fused plain upsampler (base_spec set only for the transposed-conv base).
    """

    mix_kernel: Tensor
    gen: TConvSpec
    lam: tuple[float, ...]
    scale: int
    base: str = BASE_LINEAR
    base_spec: TConvSpec | None = None
    switches: AblationSwitches = field(default_factory=AblationSwitches)

    def __post_init__(self):
        g = len(self.mix_kernel.dims) - 2
        if g not in (2, 3):
            raise ShapeError(f"spatial rank must be 2 or 3, got {g}")
        if self.mix_kernel.dims[2:] != (1,) * g:
            raise ShapeError(f"mix kernel must be 1x1, got {self.mix_kernel.dims}")
        m, n = self.mix_kernel.dims[:2]
        if self.gen.kernel.dims[0] != n:
            raise ShapeError(
                f"generator expects {self.gen.kernel.dims[0]} input channels, mix kernel has {n}"
            )
        if self.gen.kernel.dims[1] != 2 * g:
            raise ShapeError(
                f"generator must produce {2 * g} channels, got {self.gen.kernel.dims[1]}"
            )
        for k, st, p in zip(self.gen.kernel.dims[2:], self.gen.stride, self.gen.padding):
            if st != self.scale or k - 2 * p != self.scale:
                raise ShapeError(
                    f"generator geometry k={k}, stride={st}, pad={p} does not produce "
                    f"an exact x{self.scale} output"
                )
        if len(self.lam) != g or any(not 0.0 <= l <= 1.0 for l in self.lam):
            raise ValueError(f"lam must be {g} values in [0, 1], got {self.lam}")
        if self.base == BASE_LINEAR:
            if m != n:
                raise ShapeError(
                    f"linear base upsampler requires matching channels, got N={n}, M={m}"
                )
            if self.base_spec is not None:
                raise ShapeError("base_spec must be None for the linear base")
        elif self.base == BASE_TCONV:
            if self.base_spec is None:
                raise ShapeError("transposed-conv base requires base_spec")
            if self.base_spec.kernel.dims[0] != n or self.base_spec.kernel.dims[1] != m:
                raise ShapeError(
                    f"base upsampler kernel {self.base_spec.kernel.dims} must map {n} -> {m} channels"
                )
            for k, st, p in zip(
                self.base_spec.kernel.dims[2:], self.base_spec.stride, self.base_spec.padding
            ):
                if st != self.scale or k - 2 * p != self.scale:
                    raise ShapeError("base upsampler must produce an exact scaled output")
        else:
            raise ValueError(f"unknown base upsampler {self.base!r}")

    @property
    def spatial_rank(self) -> int:
        return len(self.mix_kernel.dims) - 2

    @property
    def in_channels(self) -> int:
        return self.mix_kernel.dims[1]

    @property
    def out_channels(self) -> int:
        return self.mix_kernel.dims[0]

    def mix_spec(self) -> ConvSpec:
        g = self.spatial_rank
        return ConvSpec(self.mix_kernel, (1,) * g, (0,) * g)


def gen_geometry(scale: int) -> tuple[int, int]:
    """Kernel size and padding of an exact scale-times transposed conv.

    Even scales use the overlapping k = 2s, pad = s/2 form; odd scales fall
    back to the non-overlapping k = s, pad = 0 form.
    """
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    if scale % 2 == 0:
        return 2 * scale, scale // 2
    return scale, 0


def _fan_in_uniform(rng: SplitMix, shape: Shape, fan_in: int, dtype) -> Tensor:
    a = sqrt(1.0 / fan_in)
    vals = rng.uniform_range(-a, a, prod(shape))
    return Tensor(vals.reshape(shape).astype(dtype))


def init_dtc(
    n: int,
    m: int,
    g: int,
    s: int,
    in_extents: Shape,
    r: ReceptiveField,
    base_kind: str = BASE_LINEAR,
    switches: AblationSwitches = AblationSwitches(),
    rng_seed: int = 0,
    name: str = "dtc",
    dtype=np.float64,
) -> DtcParams:
    """Build a DTC unit whose first forward pass is plain upsampling.

    The generator kernel and bias start at exactly zero, so the initial
    sampling grid is the regular grid and deformation is learned from the
    identity.  The mixing kernel uses fan-in uniform initialization.  The
    random streams are keyed by (rng_seed, name), so two inits with the
    same seed and name are bit-identical.
    """
    if g not in (2, 3):
        raise ShapeError(f"spatial rank must be 2 or 3, got {g}")
    if len(in_extents) != g:
        raise ShapeError(f"in_extents {in_extents} must have rank {g}")
    if base_kind == BASE_LINEAR and m != n:
        raise ShapeError(f"linear base upsampler requires M == N, got N={n}, M={m}")
    k, p = gen_geometry(s)
    gen_kernel = Tensor(np.zeros((n, 2 * g) + (k,) * g, dtype=dtype))
    gen_bias = Tensor(np.zeros(2 * g, dtype=dtype))
    gen = TConvSpec(gen_kernel, (s,) * g, (p,) * g, bias=gen_bias)
    mix = _fan_in_uniform(SplitMix(rng_seed, f"{name}.mix"), (m, n) + (1,) * g, n, dtype)
    base_spec = None
    if base_kind == BASE_TCONV:
        bw = _fan_in_uniform(
            SplitMix(rng_seed, f"{name}.base"), (n, m) + (k,) * g, n * k**g, dtype
        )
        base_spec = TConvSpec(
            bw, (s,) * g, (p,) * g, bias=Tensor(np.zeros(m, dtype=dtype))
        )
    lam = tuple(receptive_field_to_lambda(r, e) for e in in_extents)
    return DtcParams(
        mix_kernel=mix,
        gen=gen,
        lam=lam,
        scale=s,
        base=base_kind,
        base_spec=base_spec,
        switches=switches,
    )


# ---------------------------------------------------------------------------
# Coordinate generation
# ---------------------------------------------------------------------------


def _check_raw_pair(offset_raw: Tensor, weight_raw: Tensor, base: SampleGrid) -> int:
    if offset_raw.dims != weight_raw.dims:
        raise ShapeError(
            f"offset/weight shape mismatch: {offset_raw.dims} vs {weight_raw.dims}"
        )
    g = base.g
    expected = (base.batch, g) + base.out_spatial
    if offset_raw.dims != expected:
        raise ShapeError(
            f"raw generator output {offset_raw.dims} does not match grid layout {expected}"
        )
    return g


def _lam_array(lam, g: int, dtype) -> np.ndarray:
    arr = np.asarray(lam, dtype=dtype)
    if arr.shape != (g,):
        raise ShapeError(f"lam must have {g} entries, got {tuple(arr.shape)}")
    return arr.reshape((1, g) + (1,) * g)


def deformation(
    offset_raw: Tensor,
    weight_raw: Tensor,
    lam,
    switches: AblationSwitches,
    g: int,
) -> Tensor:
    """Per-axis coordinate displacement lambda * Offset * Weight, [B, g, spatial]."""
    off = activation_tanh(offset_raw).data if switches.use_tanh else offset_raw.data
    if switches.use_weight:
        wt = activation_sigmoid(weight_raw).data if switches.use_sigmoid else weight_raw.data
        delta = off * wt
    else:
        delta = off
    return Tensor(_lam_array(lam, g, offset_raw.data.dtype) * delta)


def coordinate_gen(
    offset_raw: Tensor,
    weight_raw: Tensor,
    lam,
    base: SampleGrid,
    switches: AblationSwitches,
) -> SampleGrid:
    """New sampling coordinates: clamp(base + lambda * Offset * Weight, -1, 1)."""
    g = _check_raw_pair(offset_raw, weight_raw, base)
    delta = deformation(offset_raw, weight_raw, lam, switches, g)
    moved = base.coords.data + np.moveaxis(delta.data, 1, -1)
    return SampleGrid(Tensor(np.clip(moved, -1.0, 1.0)))


def coordinate_gen_backward(
    offset_raw: Tensor,
    weight_raw: Tensor,
    lam,
    base: SampleGrid,
    switches: AblationSwitches,
    grad_coords: Tensor,
) -> tuple[Tensor, Tensor]:
    """Gradients of coordinate_gen w.r.t. the raw offset and weight maps.

    Positions clamped at +/-1 pass no gradient; with the weight path off the
    weight gradient is exactly zero.
    """
    g = _check_raw_pair(offset_raw, weight_raw, base)
    dtype = offset_raw.data.dtype
    lam_arr = _lam_array(lam, g, dtype)
    if switches.use_tanh:
        off = activation_tanh(offset_raw).data
        doff = tanh_derivative(offset_raw).data
    else:
        off = offset_raw.data
        doff = np.ones_like(off)
    if switches.use_weight:
        if switches.use_sigmoid:
            wt = activation_sigmoid(weight_raw).data
            dwt = sigmoid_derivative(weight_raw).data
        else:
            wt = weight_raw.data
            dwt = np.ones_like(wt)
    else:
        wt = np.ones_like(off)
        dwt = None
    moved = base.coords.data + np.moveaxis(lam_arr * (off * wt), 1, -1)
    inside = (np.abs(moved) <= 1.0).astype(dtype)
    gd = np.moveaxis(grad_coords.data * inside, -1, 1)
    grad_offset = Tensor(gd * lam_arr * wt * doff)
    if dwt is None:
        grad_weight = Tensor(np.zeros_like(weight_raw.data))
    else:
        grad_weight = Tensor(gd * lam_arr * off * dwt)
    return grad_offset, grad_weight


# ---------------------------------------------------------------------------
# Full unit, forward and backward
# ---------------------------------------------------------------------------


@dataclass
class DtcState:
    """Forward intermediates needed by dtc_backward."""

    mixed: Tensor
    raw: Tensor
    offset_raw: Tensor
    weight_raw: Tensor
    base_grid: SampleGrid
    grid: SampleGrid


@dataclass
class DtcGrads:
    grad_input: Tensor
    grad_mix_kernel: Tensor
    grad_gen_kernel: Tensor
    grad_gen_bias: Tensor | None
    grad_base_kernel: Tensor | None
    grad_base_bias: Tensor | None


def dtc_forward_state(x: Tensor, p: DtcParams) -> tuple[Tensor, DtcState]:
    """Forward pass keeping the intermediates the backward pass needs."""
    g = p.spatial_rank
    if len(x.dims) != g + 2:
        raise ShapeError(f"expected rank {g + 2} input, got {x.dims}")
    b = x.dims[0]
    out_sp = tuple(s * p.scale for s in x.dims[2:])
    mixed = conv_forward(x, p.mix_spec())
    raw = tconv_forward(x, p.gen)
    offset_raw = Tensor(raw.data[:, :g])
    weight_raw = Tensor(raw.data[:, g:])
    base = make_base_grid(b, out_sp, g, dtype=x.data.dtype)
    grid = coordinate_gen(offset_raw, weight_raw, p.lam, base, p.switches)
    sampled = grid_sample(mixed, grid)
    if p.base == BASE_LINEAR:
        up = interp_upsample(x, p.scale)
    else:
        up = tconv_forward(x, p.base_spec)
    out = ew_add(sampled, up)
    state = DtcState(mixed, raw, offset_raw, weight_raw, base, grid)
    return out, state


def dtc_forward(x: Tensor, p: DtcParams) -> tuple[Tensor, SampleGrid]:
    """Upsample x by the unit's scale; also returns the sampling grid used."""
    out, state = dtc_forward_state(x, p)
    return out, state.grid


def dtc_backward(
    x: Tensor, p: DtcParams, grad_out: Tensor, state: DtcState
) -> DtcGrads:
    """Exact reverse-mode gradients through both branches of the unit."""
    g = p.spatial_rank
    expected = (x.dims[0], p.out_channels) + tuple(s * p.scale for s in x.dims[2:])
    if grad_out.dims != expected:
        raise ShapeError(f"grad_out shape {grad_out.dims} does not match output {expected}")
    sum_axes = (0,) + tuple(range(2, g + 2))
    # Deformable branch: grid sample -> (mixed features, coordinates).
    grad_mixed, grad_coords = grid_sample_backward(state.mixed, state.grid, grad_out)
    grad_off, grad_wt = coordinate_gen_backward(
        state.offset_raw, state.weight_raw, p.lam, state.base_grid, p.switches, grad_coords
    )
    grad_raw = Tensor(np.concatenate([grad_off.data, grad_wt.data], axis=1))
    grad_in_gen, grad_gen_kernel = tconv_backward(x, p.gen, grad_raw)
    grad_gen_bias = None
    if p.gen.bias is not None:
        grad_gen_bias = Tensor(grad_raw.data.sum(axis=sum_axes))
    grad_in_mix, grad_mix_kernel = conv_backward(x, p.mix_spec(), grad_mixed)
    # Base branch.
    grad_base_kernel = grad_base_bias = None
    if p.base == BASE_LINEAR:
        grad_in_base = interp_upsample_backward(x, p.scale, grad_out)
    else:
        grad_in_base, grad_base_kernel = tconv_backward(x, p.base_spec, grad_out)
        if p.base_spec.bias is not None:
            grad_base_bias = Tensor(grad_out.data.sum(axis=sum_axes))
    grad_input = Tensor(grad_in_gen.data + grad_in_mix.data + grad_in_base.data)
    return DtcGrads(
        grad_input=grad_input,
        grad_mix_kernel=grad_mix_kernel,
        grad_gen_kernel=grad_gen_kernel,
        grad_gen_bias=grad_gen_bias,
        grad_base_kernel=grad_base_kernel,
        grad_base_bias=grad_base_bias,
    )
