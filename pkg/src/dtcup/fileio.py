"""On-disk formats: .dtct tensor files, PGM images, parameter checkpoints.

Tensor file layout (bit-exact, little-endian):

    bytes 0-3   magic "DTCT"
    byte  4     format version, 1
    byte  5     dtype code, 1 = float32
    byte  6     rank
    byte  7     reserved, 0
    then        rank x u32 extents
    then        row-major float32 payload

A checkpoint is the concatenation of tensor records in this format plus a
plain-text manifest with one ``name offset extents`` line per tensor.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"DTCT"
_VERSION = 1
_DTYPE_F32 = 1
_MAX_ELEMENTS = 1 << 31


class TensorFileError(ValueError):
    """Raised for malformed .dtct files; message names the defect."""


class PgmRankError(ValueError):
    def __init__(self, dims):
        super().__init__(f"PGM export needs a rank-2 tensor, got rank {len(dims)} {dims}")


def tensor_bytes(t: Tensor) -> bytes:
    """Serialize a float32 tensor to the .dtct wire format."""
    if t.dtype != np.float32:
        raise TypeError(f"tensor files store float32, got {t.data.dtype.name}; convert first")
    rank = len(t.dims)
    if rank > 255:
        raise TensorFileError(f"extent overflow: rank {rank} exceeds format limit")
    if any(e > 0xFFFFFFFF for e in t.dims):
        raise TensorFileError(f"extent overflow: {t.dims} does not fit in u32")
    header = MAGIC + struct.pack("<BBBB", _VERSION, _DTYPE_F32, rank, 0)
    header += struct.pack(f"<{rank}I", *t.dims)
    payload = t.data.astype("<f4", copy=False).tobytes()
    return header + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one tensor record from buf at offset; returns (tensor, end offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise TensorFileError(f"bad magic: expected {MAGIC!r}, got {buf[offset:offset + 4]!r}")
    if len(buf) < offset + 8:
        raise TensorFileError("truncated payload: header incomplete")
    version, dtype_code, rank, _ = struct.unpack_from("<BBBB", buf, offset + 4)
    if version != _VERSION:
        raise TensorFileError(f"unsupported version {version}")
    if dtype_code != _DTYPE_F32:
        raise TensorFileError(f"unsupported dtype code {dtype_code}")
    if rank < 1:
        raise TensorFileError("invalid rank 0")
    ext_end = offset + 8 + 4 * rank
    if len(buf) < ext_end:
        raise TensorFileError("truncated payload: extent list incomplete")
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    if any(e == 0 for e in dims):
        raise TensorFileError(f"invalid extent 0 in {dims}")
    n = 1
    for e in dims:
        n *= e
        if n > _MAX_ELEMENTS:
            raise TensorFileError(f"extent overflow: {dims} declares more than {_MAX_ELEMENTS} elements")
    end = ext_end + 4 * n
    if len(buf) < end:
        raise TensorFileError(f"truncated payload: declared {4 * n} bytes, found {len(buf) - ext_end}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=ext_end).reshape(dims)
    return Tensor(data.astype(np.float32)), end


def write_tensor(path, t: Tensor) -> None:
    Path(path).write_bytes(tensor_bytes(t))


def read_tensor(path) -> Tensor:
    buf = Path(path).read_bytes()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise TensorFileError(f"truncated payload: {len(buf) - end} trailing bytes")
    return t


def write_checkpoint(data_path, manifest_path, entries: list[tuple[str, Tensor]]) -> None:
    """Write named tensors as concatenated .dtct records plus a manifest."""
    blobs = []
    lines = []
    offset = 0
    for name, t in entries:
        b = tensor_bytes(t)
        lines.append(f"{name} {offset} {'x'.join(str(e) for e in t.dims)}\n")
        blobs.append(b)
        offset += len(b)
    Path(data_path).write_bytes(b"".join(blobs))
    Path(manifest_path).write_text("".join(lines))


def read_checkpoint(data_path, manifest_path) -> list[tuple[str, Tensor]]:
    buf = Path(data_path).read_bytes()
    entries = []
    for line in Path(manifest_path).read_text().splitlines():
        if not line.strip():
            continue
        name, offset, dims_txt = line.split()
        t, _ = tensor_from_bytes(buf, int(offset))
        dims = tuple(int(e) for e in dims_txt.split("x"))
        if t.dims != dims:
            raise TensorFileError(f"manifest shape {dims} does not match record {t.dims} for {name}")
        entries.append((name, t))
    return entries


def export_pgm(path, image: Tensor) -> None:
    """Render a rank-2 tensor as a binary PGM (P5), min-max rescaled to 0-255.

    A constant image maps to mid-gray 128.
    """
    if len(image.dims) != 2:
        raise PgmRankError(image.dims)
    arr = image.data.astype(np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        pix = np.rint((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pix = np.full(arr.shape, 128, dtype=np.uint8)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pix.tobytes())
