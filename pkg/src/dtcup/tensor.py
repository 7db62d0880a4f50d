"""Dense N-dimensional tensors and the elementwise math everything builds on.

A Tensor is a contiguous row-major float32 or float64 buffer plus its shape.
Feature maps follow the fixed axis order [batch, channels, (depth,) height,
width].  Tensors are immutable from the standpoint of the operations in this
package: every operation is a pure function returning fresh tensors, and any
operation that would produce a NaN or Inf raises instead of returning it.
"""

from __future__ import annotations

import numpy as np

Shape = tuple[int, ...]

_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


class Tensor:
    """Dense N-d array of float32 or float64, contiguous and row-major.

    Invariants: the buffer length equals the product of ``dims``, the shape
    is non-empty with every extent >= 1, and all elements are finite.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            raise ShapeError("tensor rank must be >= 1, got a scalar")
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        # A single-pass sum catches NaN and +/-Inf (Inf-Inf gives NaN) much
        # cheaper than isfinite().all(); fall back to the exact check only
        # when the sum itself is suspect.
        with np.errstate(invalid="ignore", over="ignore"):
            total = arr.sum(dtype=np.float64)
        if not np.isfinite(total) and not np.isfinite(arr).all():
            raise ValueError("tensor contains non-finite elements")
        self.data = np.ascontiguousarray(arr)

    @property
    def dims(self) -> Shape:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.dims}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype.name})"


def tensor(data, dtype=np.float64) -> Tensor:
    return Tensor(data, dtype=dtype)


def zeros(dims: Shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(dims, dtype=dtype))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def same_dims(a: Tensor, b: Tensor) -> None:
    """Raise ShapeError (reporting both shapes) unless a and b match."""
    if a.dims != b.dims:
        raise ShapeError(f"shape mismatch: {a.dims} vs {b.dims}")


def ew_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of identical shape."""
    same_dims(a, b)
    return Tensor(a.data + b.data)


def _open_interval_clip(arr: np.ndarray, lo: float, hi: float) -> np.ndarray:
    # Saturated activations round onto the closed endpoint in IEEE floats
    # (e.g. tanh(20) == 1.0 in float64); nudge one ulp back inside so the
    # open-interval range contract holds for all inputs.
    one = arr.dtype.type(1.0)
    return np.clip(
        arr,
        np.nextafter(arr.dtype.type(lo), one),
        np.nextafter(arr.dtype.type(hi), -one),
    )


def activation_tanh(x: Tensor) -> Tensor:
    """Hyperbolic tangent; outputs lie strictly inside (-1, 1)."""
    return Tensor(_open_interval_clip(np.tanh(x.data), -1.0, 1.0))


def tanh_derivative(x: Tensor) -> Tensor:
    """d tanh / dx evaluated at x, i.e. 1 - tanh(x)**2."""
    t = np.tanh(x.data)
    return Tensor(1.0 - t * t)


def _sigmoid(arr: np.ndarray) -> np.ndarray:
    # Piecewise form avoids overflow in exp for large negative inputs.
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_sigmoid(x: Tensor) -> Tensor:
    """Logistic function; outputs lie strictly inside (0, 1)."""
    return Tensor(_open_interval_clip(_sigmoid(x.data), 0.0, 1.0))


def sigmoid_derivative(x: Tensor) -> Tensor:
    """d sigmoid / dx evaluated at x, i.e. sigmoid(x) * (1 - sigmoid(x))."""
    s = _sigmoid(x.data)
    return Tensor(s * (1.0 - s))
