"""Structural operators with hand-derived backward passes.

Implements N-dimensional (spatial rank 2 and 3) cross-correlation style
convolution, transposed convolution, normalized-coordinate grid sampling,
and fixed-grid linear upsampling over tensors laid out as
[batch, channels, (depth,) height, width].

Conventions, fixed across the package:

* Coordinates are normalized to [-1, 1] per axis with half-pixel centers:
  output index i of S maps to c = -1 + (2i + 1) / S, and a coordinate maps
  to the continuous input index u = ((c + 1) * S_in - 1) / 2.
* Sampling outside the map clamps u to [0, S_in - 1] (border policy); the
  gradient with respect to a clamped coordinate axis is 0.
* Interpolation weights come from w = u - floor(u), so a coordinate exactly
  on a texel center takes that texel with weight 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from math import prod

import numpy as np

from .tensor import Shape, ShapeError, Tensor

_ALL = slice(None)


def _check_rank(g: int) -> None:
    if g not in (2, 3):
        raise ShapeError(f"spatial rank must be 2 or 3, got {g}")


def _per_axis(value, g: int, name: str) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * g
    t = tuple(int(v) for v in value)
    if len(t) != g:
        raise ShapeError(f"{name} must have {g} entries, got {t}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    """Convolution parameters: kernel [Cout, Cin, k...], per-axis stride and
    zero padding, optional per-output-channel bias."""

    kernel: Tensor
    stride: tuple[int, ...]
    padding: tuple[int, ...]
    bias: Tensor | None = None

    def __post_init__(self):
        g = len(self.kernel.dims) - 2
        _check_rank(g)
        object.__setattr__(self, "stride", _per_axis(self.stride, g, "stride"))
        object.__setattr__(self, "padding", _per_axis(self.padding, g, "padding"))
        if any(s < 1 for s in self.stride):
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.bias is not None and self.bias.dims != (self.kernel.dims[0],):
            raise ShapeError(
                f"bias shape {self.bias.dims} does not match {self.kernel.dims[0]} output channels"
            )

    @property
    def spatial_rank(self) -> int:
        return len(self.kernel.dims) - 2

    def out_shape(self, in_spatial: Shape) -> Shape:
        k = self.kernel.dims[2:]
        out = tuple(
            (s + 2 * p - kk) // st + 1
            for s, p, kk, st in zip(in_spatial, self.padding, k, self.stride)
        )
        if any(e < 1 for e in out) or any(
            s + 2 * p < kk for s, p, kk in zip(in_spatial, self.padding, k)
        ):
            raise ShapeError(
                f"non-positive output extent {out} for input {in_spatial}, "
                f"kernel {k}, stride {self.stride}, padding {self.padding}"
            )
        return out


@dataclass(frozen=True)
class TConvSpec:
    """Transposed-convolution parameters: kernel [Cin, Cout, k...], stride,
    padding, optional per-output-channel bias.

    Output extent per axis is (S - 1) * stride - 2 * padding + k.
    """

    kernel: Tensor
    stride: tuple[int, ...]
    padding: tuple[int, ...]
    bias: Tensor | None = None

    def __post_init__(self):
        g = len(self.kernel.dims) - 2
        _check_rank(g)
        object.__setattr__(self, "stride", _per_axis(self.stride, g, "stride"))
        object.__setattr__(self, "padding", _per_axis(self.padding, g, "padding"))
        if any(s < 1 for s in self.stride):
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.bias is not None and self.bias.dims != (self.kernel.dims[1],):
            raise ShapeError(
                f"bias shape {self.bias.dims} does not match {self.kernel.dims[1]} output channels"
            )

    @property
    def spatial_rank(self) -> int:
        return len(self.kernel.dims) - 2

    def out_shape(self, in_spatial: Shape) -> Shape:
        k = self.kernel.dims[2:]
        out = tuple(
            (s - 1) * st - 2 * p + kk
            for s, p, kk, st in zip(in_spatial, self.padding, k, self.stride)
        )
        if any(e < 1 for e in out):
            raise ShapeError(
                f"non-positive output extent {out} for input {in_spatial}, "
                f"kernel {k}, stride {self.stride}, padding {self.padding}"
            )
        return out


# ---------------------------------------------------------------------------
# im2col / col2im: one strided slice per kernel tap, deterministic tap order.
# ---------------------------------------------------------------------------


def _tap_slices(tap, win: Shape, stride) -> tuple[slice, ...]:
    return tuple(
        slice(t, t + (w - 1) * s + 1, s) for t, w, s in zip(tap, win, stride)
    )


def _im2col(x: np.ndarray, k: Shape, stride, padding, win: Shape) -> np.ndarray:
    """Gather kernel windows: x [B, C, S...] -> [B, C * prod(k), prod(win)]."""
    b, c = x.shape[:2]
    if any(padding):
        pad = [(0, 0), (0, 0)] + [(p, p) for p in padding]
        x = np.pad(x, pad)
    cols = np.empty((b, c) + k + win, dtype=x.dtype)
    for tap in product(*(range(kk) for kk in k)):
        cols[(_ALL, _ALL) + tap] = x[(_ALL, _ALL) + _tap_slices(tap, win, stride)]
    return cols.reshape(b, c * prod(k), prod(win))


def _col2im(
    cols: np.ndarray, c: int, full: Shape, k: Shape, stride, padding, win: Shape
) -> np.ndarray:
    """Adjoint of _im2col: scatter-add windows back to [B, C, full...]."""
    b = cols.shape[0]
    cols = cols.reshape((b, c) + k + win)
    padded_shape = tuple(f + 2 * p for f, p in zip(full, padding))
    out = np.zeros((b, c) + padded_shape, dtype=cols.dtype)
    for tap in product(*(range(kk) for kk in k)):
        out[(_ALL, _ALL) + _tap_slices(tap, win, stride)] += cols[(_ALL, _ALL) + tap]
    if any(padding):
        crop = tuple(slice(p, p + f) for p, f in zip(padding, full))
        out = out[(_ALL, _ALL) + crop]
    return out


def _check_feature_input(x: Tensor, g: int, cin: int, what: str) -> None:
    if len(x.dims) != g + 2:
        raise ShapeError(f"{what}: expected rank {g + 2} input [B, C, spatial...], got {x.dims}")
    if x.dims[1] != cin:
        raise ShapeError(f"{what}: input has {x.dims[1]} channels, kernel expects {cin}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _conv_forward_cols(x: Tensor, spec: ConvSpec) -> tuple[Tensor, np.ndarray]:
    g = spec.spatial_rank
    cout, cin = spec.kernel.dims[:2]
    _check_feature_input(x, g, cin, "conv_forward")
    win = spec.out_shape(x.dims[2:])
    cols = _im2col(x.data, spec.kernel.dims[2:], spec.stride, spec.padding, win)
    w = spec.kernel.data.reshape(cout, -1)
    y = np.matmul(w, cols)
    if spec.bias is not None:
        y = y + spec.bias.data[None, :, None]
    return Tensor(y.reshape((x.dims[0], cout) + win)), cols


def conv_forward(x: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlation with zero padding: [B, Cin, S...] -> [B, Cout, S'...]."""
    return _conv_forward_cols(x, spec)[0]


def _conv_grads_from_cols(
    x: Tensor, spec: ConvSpec, grad_out: Tensor, cols: np.ndarray
) -> tuple[Tensor, Tensor]:
    g = spec.spatial_rank
    cout, cin = spec.kernel.dims[:2]
    win = spec.out_shape(x.dims[2:])
    k = spec.kernel.dims[2:]
    gmat = grad_out.data.reshape(x.dims[0], cout, -1)
    w = spec.kernel.data.reshape(cout, -1)
    grad_kernel = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
    grad_cols = np.matmul(w.T, gmat)
    grad_x = _col2im(grad_cols, cin, x.dims[2:], k, spec.stride, spec.padding, win)
    return Tensor(grad_x), Tensor(grad_kernel.reshape(spec.kernel.dims))


def conv_backward(x: Tensor, spec: ConvSpec, grad_out: Tensor) -> tuple[Tensor, Tensor]:
    """Exact gradients of conv_forward w.r.t. input and kernel.

    The bias gradient, when a bias is present, is grad_out summed over batch
    and spatial axes.
    """
    g = spec.spatial_rank
    cout, cin = spec.kernel.dims[:2]
    _check_feature_input(x, g, cin, "conv_backward")
    win = spec.out_shape(x.dims[2:])
    expected = (x.dims[0], cout) + win
    if grad_out.dims != expected:
        raise ShapeError(f"grad_out shape {grad_out.dims} does not match forward output {expected}")
    cols = _im2col(x.data, spec.kernel.dims[2:], spec.stride, spec.padding, win)
    return _conv_grads_from_cols(x, spec, grad_out, cols)


# ---------------------------------------------------------------------------
# Transposed convolution (adjoint of the matching strided convolution)
# ---------------------------------------------------------------------------


def tconv_forward(x: Tensor, spec: TConvSpec) -> Tensor:
    """Transposed convolution: [B, Cin, S...] -> [B, Cout, (S-1)*s - 2p + k...]."""
    g = spec.spatial_rank
    cin, cout = spec.kernel.dims[:2]
    _check_feature_input(x, g, cin, "tconv_forward")
    out_sp = spec.out_shape(x.dims[2:])
    k = spec.kernel.dims[2:]
    b = x.dims[0]
    w = spec.kernel.data.reshape(cin, -1)  # [Cin, Cout * prod(k)]
    cols = np.matmul(w.T, x.data.reshape(b, cin, -1))
    y = _col2im(cols, cout, out_sp, k, spec.stride, spec.padding, x.dims[2:])
    if spec.bias is not None:
        y = y + spec.bias.data[(None, _ALL) + (None,) * g]
    return Tensor(y)


def tconv_backward(x: Tensor, spec: TConvSpec, grad_out: Tensor) -> tuple[Tensor, Tensor]:
    """Exact gradients of tconv_forward w.r.t. input and kernel.

    The input gradient is a plain strided convolution of grad_out with the
    same kernel; the bias gradient is grad_out summed over batch and space.
    """
    g = spec.spatial_rank
    cin, cout = spec.kernel.dims[:2]
    _check_feature_input(x, g, cin, "tconv_backward")
    out_sp = spec.out_shape(x.dims[2:])
    expected = (x.dims[0], cout) + out_sp
    if grad_out.dims != expected:
        raise ShapeError(f"grad_out shape {grad_out.dims} does not match forward output {expected}")
    k = spec.kernel.dims[2:]
    b = x.dims[0]
    cols_g = _im2col(grad_out.data, k, spec.stride, spec.padding, x.dims[2:])
    w = spec.kernel.data.reshape(cin, -1)
    grad_x = np.matmul(w, cols_g).reshape(x.dims)
    grad_kernel = np.matmul(x.data.reshape(b, cin, -1), cols_g.transpose(0, 2, 1)).sum(axis=0)
    return Tensor(grad_x), Tensor(grad_kernel.reshape(spec.kernel.dims))


# ---------------------------------------------------------------------------
# Grid sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleGrid:
    """Normalized sampling coordinates, one g-vector per output position.

    coords has shape [B, spatial_out..., g] with g in {2, 3}; coordinate
    order along the last axis matches the spatial axis order of feature
    maps ((depth,) height, width).
    """

    coords: Tensor

    def __post_init__(self):
        dims = self.coords.dims
        g = dims[-1]
        _check_rank(g)
        if len(dims) != g + 2:
            raise ShapeError(
                f"grid coords must be [B, spatial({g} axes), {g}], got {dims}"
            )

    @property
    def g(self) -> int:
        return self.coords.dims[-1]

    @property
    def batch(self) -> int:
        return self.coords.dims[0]

    @property
    def out_spatial(self) -> Shape:
        return self.coords.dims[1:-1]


def make_base_grid(batch: int, out_spatial: Shape, g: int, dtype=np.float64) -> SampleGrid:
    """Regular grid of output-pixel centers in normalized coordinates.

    Axis coordinate for index i out of S is -1 + (2i + 1) / S.
    """
    _check_rank(g)
    if len(out_spatial) != g:
        raise ShapeError(f"out_spatial {out_spatial} must have rank {g}")
    axes = [
        (-1.0 + (2.0 * np.arange(s, dtype=dtype) + 1.0) / s) for s in out_spatial
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack(mesh, axis=-1)[None]
    coords = np.broadcast_to(coords, (batch,) + tuple(out_spatial) + (g,))
    return SampleGrid(Tensor(np.ascontiguousarray(coords.astype(dtype))))


def _check_grid(x: Tensor, grid: SampleGrid, what: str) -> int:
    g = grid.g
    if len(x.dims) != g + 2:
        raise ShapeError(f"{what}: input rank {len(x.dims) - 2} does not match grid rank {g}")
    if x.dims[0] != grid.batch:
        raise ShapeError(f"{what}: batch mismatch, input {x.dims[0]} vs grid {grid.batch}")
    return g


def _sample_geometry(x: np.ndarray, coords: np.ndarray, g: int):
    """Continuous indices, corner indices, weights, and interior masks."""
    in_sp = x.shape[2:]
    scale = np.asarray(in_sp, dtype=x.dtype)
    u_raw = ((coords + 1.0) * scale - 1.0) / 2.0
    hi = scale - 1.0
    u = np.clip(u_raw, 0.0, hi)
    interior = (u_raw >= 0.0) & (u_raw <= hi)
    i0 = np.floor(u).astype(np.int64)
    np.clip(i0, 0, np.asarray(in_sp) - 1, out=i0)
    w = u - i0
    i1 = np.minimum(i0 + 1, np.asarray(in_sp) - 1)
    return u, i0, i1, w, interior


def _flat_index(idx_axes, in_sp: Shape) -> np.ndarray:
    lin = idx_axes[0]
    for a in range(1, len(in_sp)):
        lin = lin * in_sp[a] + idx_axes[a]
    return lin


def grid_sample(x: Tensor, grid: SampleGrid) -> Tensor:
    """Bilinear (g=2) / trilinear (g=3) sampling of x at grid coordinates.

    Output is [B, C, spatial_out...]; out-of-range coordinates use the
    border (clamp) policy.
    """
    g = _check_grid(x, grid, "grid_sample")
    b, c = x.dims[:2]
    in_sp = x.dims[2:]
    coords = grid.coords.data.astype(x.data.dtype, copy=False)
    out_sp = coords.shape[1:-1]
    flat_coords = coords.reshape(b, -1, g)
    _, i0, i1, w, _ = _sample_geometry(x.data, flat_coords, g)
    v = prod(in_sp)
    rows = np.ascontiguousarray(x.data.reshape(b, c, -1).transpose(0, 2, 1)).reshape(b * v, c)
    boff = (np.arange(b, dtype=np.int64) * v)[:, None]
    acc = np.zeros((b, flat_coords.shape[1], c), dtype=x.data.dtype)
    for corner in product((0, 1), repeat=g):
        idx = [i1[..., a] if bit else i0[..., a] for a, bit in enumerate(corner)]
        weight = np.ones(w.shape[:-1], dtype=x.data.dtype)
        for a, bit in enumerate(corner):
            weight = weight * (w[..., a] if bit else (1.0 - w[..., a]))
        acc += weight[..., None] * rows[boff + _flat_index(idx, in_sp)]
    out = acc.transpose(0, 2, 1).reshape((b, c) + out_sp)
    return Tensor(out)


def _scatter_corner(acc: np.ndarray, lin: np.ndarray, vals: np.ndarray, v: int) -> None:
    """acc[b, lin[b, p], :] += vals[b, p, :] with duplicate-index accumulation.

    Uses a composite (batch, voxel, channel) bincount, which is much faster
    than np.add.at and still deterministic.
    """
    b, p, c = vals.shape
    comp = (np.arange(b, dtype=np.int64)[:, None] * v + lin) * c
    comp = comp[..., None] + np.arange(c, dtype=np.int64)
    flat = np.bincount(comp.ravel(), weights=vals.ravel(), minlength=b * v * c)
    acc += flat.reshape(acc.shape)


def _grid_sample_grads(
    x: Tensor, grid: SampleGrid, grad_out: Tensor, want_grid_grad: bool
) -> tuple[Tensor, Tensor | None]:
    g = _check_grid(x, grid, "grid_sample_backward")
    b, c = x.dims[:2]
    in_sp = x.dims[2:]
    coords = grid.coords.data.astype(x.data.dtype, copy=False)
    out_sp = coords.shape[1:-1]
    expected = (b, c) + out_sp
    if grad_out.dims != expected:
        raise ShapeError(f"grad_out shape {grad_out.dims} does not match forward output {expected}")
    flat_coords = coords.reshape(b, -1, g)
    _, i0, i1, w, interior = _sample_geometry(x.data, flat_coords, g)
    p = flat_coords.shape[1]
    v = prod(in_sp)
    g_rows = np.ascontiguousarray(grad_out.data.reshape(b, c, -1).transpose(0, 2, 1))
    boff = (np.arange(b, dtype=np.int64) * v)[:, None]
    x_rows = None
    if want_grid_grad:
        x_rows = np.ascontiguousarray(x.data.reshape(b, c, -1).transpose(0, 2, 1)).reshape(b * v, c)
    grad_x_rows = np.zeros((b, v, c), dtype=np.float64)
    grad_u = np.zeros((b, p, g), dtype=x.data.dtype) if want_grid_grad else None
    for corner in product((0, 1), repeat=g):
        idx = [i1[..., a] if bit else i0[..., a] for a, bit in enumerate(corner)]
        lin = _flat_index(idx, in_sp)
        weight = np.ones((b, p), dtype=x.data.dtype)
        for a, bit in enumerate(corner):
            weight = weight * (w[..., a] if bit else (1.0 - w[..., a]))
        _scatter_corner(grad_x_rows, lin, weight[..., None] * g_rows, v)
        if not want_grid_grad:
            continue
        # d/du_a of the corner weight: +/- product of the other axes' factors.
        dot = (g_rows * x_rows[boff + lin]).sum(axis=-1)  # [B, P]
        for a in range(g):
            partial = np.ones((b, p), dtype=x.data.dtype)
            for aa, bit in enumerate(corner):
                if aa == a:
                    continue
                partial = partial * (w[..., aa] if bit else (1.0 - w[..., aa]))
            sign = 1.0 if corner[a] else -1.0
            grad_u[..., a] += sign * partial * dot
    grad_x = grad_x_rows.transpose(0, 2, 1).reshape(x.dims).astype(x.data.dtype)
    if not want_grid_grad:
        return Tensor(grad_x), None
    du_dc = np.asarray(in_sp, dtype=x.data.dtype) / 2.0
    grad_coords = grad_u * du_dc * interior.astype(x.data.dtype)
    return Tensor(grad_x), Tensor(grad_coords.reshape((b,) + out_sp + (g,)))


def grid_sample_backward(
    x: Tensor, grid: SampleGrid, grad_out: Tensor
) -> tuple[Tensor, Tensor]:
    """Gradients of grid_sample w.r.t. the input map and the grid coordinates.

    Coordinates clamped by the border policy get zero gradient on the
    clamped axis.
    """
    grad_x, grad_coords = _grid_sample_grads(x, grid, grad_out, want_grid_grad=True)
    return grad_x, grad_coords


# ---------------------------------------------------------------------------
# Fixed-grid upsampling
# ---------------------------------------------------------------------------


def interp_upsample(x: Tensor, scale: int) -> Tensor:
    """Linear interpolation upsample by an integer factor, channels unchanged.

    Equivalent to grid_sample over the regular output-pixel-center grid.
    """
    if scale < 1:
        raise ShapeError(f"scale must be >= 1, got {scale}")
    g = len(x.dims) - 2
    _check_rank(g)
    out_sp = tuple(s * scale for s in x.dims[2:])
    grid = make_base_grid(x.dims[0], out_sp, g, dtype=x.data.dtype)
    return grid_sample(x, grid)


def interp_upsample_backward(x: Tensor, scale: int, grad_out: Tensor) -> Tensor:
    """Gradient of interp_upsample w.r.t. its input."""
    g = len(x.dims) - 2
    _check_rank(g)
    out_sp = tuple(s * scale for s in x.dims[2:])
    grid = make_base_grid(x.dims[0], out_sp, g, dtype=x.data.dtype)
    grad_x, _ = _grid_sample_grads(x, grid, grad_out, want_grid_grad=False)
    return grad_x


def nearest_upsample(x: Tensor, scale: int) -> Tensor:
    """Nearest-neighbor upsample by an integer factor (block replication)."""
    if scale < 1:
        raise ShapeError(f"scale must be >= 1, got {scale}")
    g = len(x.dims) - 2
    _check_rank(g)
    out = x.data
    for axis in range(2, 2 + g):
        out = np.repeat(out, scale, axis=axis)
    return Tensor(out)


def nearest_upsample_backward(x: Tensor, scale: int, grad_out: Tensor) -> Tensor:
    """Gradient of nearest_upsample: sum over each replicated block."""
    g = len(x.dims) - 2
    b, c = x.dims[:2]
    in_sp = x.dims[2:]
    expected = (b, c) + tuple(s * scale for s in in_sp)
    if grad_out.dims != expected:
        raise ShapeError(f"grad_out shape {grad_out.dims} does not match forward output {expected}")
    arr = grad_out.data
    shape = [b, c]
    for s in in_sp:
        shape.extend([s, scale])
    arr = arr.reshape(shape)
    for a in range(g):
        arr = arr.sum(axis=3 + a)
    return Tensor(arr)
