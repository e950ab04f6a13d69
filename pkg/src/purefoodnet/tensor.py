"""Dense 4-D tensors, convolution shape arithmetic, and zero padding.

Everything that flows between layers is a `Tensor4` in row-major
(i, h, w, c) layout: batch, height, width, channels. Vectors and matrices
are carried as degenerate shapes such as (i, 1, 1, n). Values are 32- or
64-bit floats and must be finite; construction validates both.

The module also implements the "PFT1" binary tensor file format used for
debugging dumps and as the payload encoding inside weight files.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, GeometryError, NonFiniteError, ShapeError

DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
PFT1_MAGIC = b"PFT1"


@dataclass(frozen=True)
class Shape4:
    """Batch/height/width/channel extents of a rank-4 tensor."""

    i: int
    h: int
    w: int
    c: int

    def __post_init__(self):
        for field in ("i", "h", "w", "c"):
            v = getattr(self, field)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ShapeError(f"Shape4.{field} must be a positive integer, got {v!r}")

    @property
    def size(self) -> int:
        return self.i * self.h * self.w * self.c

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.i, self.h, self.w, self.c)


@dataclass(frozen=True)
class ConvGeometry:
    """Square-kernel convolution geometry: kernel side k, stride s, padding z."""

    k: int
    s: int = 1
    z: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise GeometryError(f"kernel side must be >= 1, got {self.k}")
        if self.s < 1:
            raise GeometryError(f"stride must be >= 1, got {self.s}")
        if self.z < 0:
            raise GeometryError(f"padding must be >= 0, got {self.z}")


class Tensor4:
    """Immutable dense rank-4 array of finite 32- or 64-bit floats.

    The wrapped ndarray is marked read-only; operations return new tensors.
    """

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs a rank-4 array, got rank {arr.ndim}")
        if arr.dtype not in DTYPE_CODES:
            raise ShapeError(f"Tensor4 dtype must be float32 or float64, got {arr.dtype}")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"Tensor4 dims must all be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("Tensor4 values must be finite")
        # Detach from shared buffers so the read-only flag actually protects us.
        if not arr.flags.owndata or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr).copy() if not arr.flags.c_contiguous else arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "_data", arr)

    @classmethod
    def from_flat(cls, shape: Shape4, values, dtype=np.float32) -> "Tensor4":
        arr = np.asarray(values, dtype=dtype).reshape(shape.as_tuple())
        return cls(arr)

    @classmethod
    def zeros(cls, shape: Shape4, dtype=np.float32) -> "Tensor4":
        return cls(np.zeros(shape.as_tuple(), dtype=dtype))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Shape4:
        return Shape4(*self._data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def i(self) -> int:
        return self._data.shape[0]

    @property
    def h(self) -> int:
        return self._data.shape[1]

    @property
    def w(self) -> int:
        return self._data.shape[2]

    @property
    def c(self) -> int:
        return self._data.shape[3]

    def flat(self) -> np.ndarray:
        return self._data.reshape(-1)

    def astype(self, dtype) -> "Tensor4":
        dt = np.dtype(dtype)
        if dt == self._data.dtype:
            return self
        return Tensor4(self._data.astype(dt))

    def __repr__(self):
        s = self.shape
        return f"Tensor4(i={s.i}, h={s.h}, w={s.w}, c={s.c}, dtype={self._data.dtype})"


def flat_index(shape: Shape4, i: int, h: int, w: int, c: int) -> int:
    """Row-major flat offset of coordinate (i, h, w, c)."""
    for name, v, bound in (("i", i, shape.i), ("h", h, shape.h), ("w", w, shape.w), ("c", c, shape.c)):
        if v < 0 or v >= bound:
            raise ShapeError(f"coordinate {name}={v} out of range [0, {bound})")
    return ((i * shape.h + h) * shape.w + w) * shape.c + c


def coords_of(shape: Shape4, flat: int) -> tuple[int, int, int, int]:
    """Inverse of `flat_index`."""
    if flat < 0 or flat >= shape.size:
        raise ShapeError(f"flat index {flat} out of range [0, {shape.size})")
    flat, c = divmod(flat, shape.c)
    flat, w = divmod(flat, shape.w)
    i, h = divmod(flat, shape.h)
    return (i, h, w, c)


def conv_output_size(i: int, g: ConvGeometry) -> int:
    """Output side length for input side i under geometry g.

    o = floor((i - k + 2z) / s) + 1, integer arithmetic throughout.
    """
    if i < 1:
        raise GeometryError(f"input side must be >= 1, got {i}")
    span = i - g.k + 2 * g.z
    if span < 0:
        raise GeometryError(
            f"kernel cannot be placed: i={i}, k={g.k}, z={g.z} gives i - k + 2z = {span} < 0"
        )
    return span // g.s + 1


def same_padding_amount(k: int) -> int:
    """Per-side zero padding that preserves size at stride 1: ceil((k-1)/2)."""
    if k < 1:
        raise GeometryError(f"kernel side must be >= 1, got {k}")
    # ceil((k - 1) / 2) == k // 2 for positive integers
    return k // 2


def zero_pad(x: Tensor4, z: int) -> Tensor4:
    """Pad the two spatial dims with z zeros per side."""
    if z < 0:
        raise GeometryError(f"padding must be >= 0, got {z}")
    if z == 0:
        return x
    padded = np.pad(x.data, ((0, 0), (z, z), (z, z), (0, 0)))
    return Tensor4(padded)


def crop_interior(x: Tensor4, z: int) -> Tensor4:
    """Remove z border cells per spatial side; inverse of `zero_pad`."""
    if z == 0:
        return x
    if 2 * z >= x.h or 2 * z >= x.w:
        raise GeometryError(f"cannot crop {z} per side from spatial dims ({x.h}, {x.w})")
    return Tensor4(x.data[:, z:-z, z:-z, :])


def slice_window(x: Tensor4, image: int, row: int, col: int, k: int) -> np.ndarray:
    """The k x k x c receptive-field block at (row, col) of one image."""
    if image < 0 or image >= x.i:
        raise ShapeError(f"image index {image} out of range [0, {x.i})")
    if k < 1:
        raise GeometryError(f"window side must be >= 1, got {k}")
    if row < 0 or col < 0 or row + k > x.h or col + k > x.w:
        raise GeometryError(
            f"window [{row}:{row + k}, {col}:{col + k}] escapes spatial bounds ({x.h}, {x.w})"
        )
    return x.data[image, row:row + k, col:col + k, :].copy()


# ---------------------------------------------------------------------------
# PFT1 binary tensor format: b"PFT1", dtype byte (0=f32, 1=f64), four u64 LE
# shape fields (i, h, w, c), then raw little-endian values in row-major order.
# ---------------------------------------------------------------------------

def tensor_to_bytes(x: Tensor4) -> bytes:
    code = DTYPE_CODES[x.dtype]
    header = PFT1_MAGIC + bytes([code]) + struct.pack("<4Q", *x.shape.as_tuple())
    payload = np.ascontiguousarray(x.data, dtype=CODE_DTYPES[code]).tobytes()
    return header + payload


def tensor_from_bytes(buf: bytes) -> Tensor4:
    if len(buf) < 37:
        raise DataFormatError(f"PFT1 data truncated: {len(buf)} bytes")
    if buf[:4] != PFT1_MAGIC:
        raise DataFormatError(f"bad PFT1 magic {buf[:4]!r}")
    code = buf[4]
    if code not in CODE_DTYPES:
        raise DataFormatError(f"unknown PFT1 dtype code {code}")
    dims = struct.unpack("<4Q", buf[5:37])
    dtype = CODE_DTYPES[code]
    count = 1
    for d in dims:
        count *= d
    expected = 37 + count * dtype.itemsize
    if len(buf) != expected:
        raise DataFormatError(f"PFT1 payload length {len(buf) - 37}, expected {expected - 37}")
    values = np.frombuffer(buf, dtype=dtype, count=count, offset=37)
    return Tensor4(values.reshape(dims).astype(dtype.newbyteorder("=")))


def save_tensor(path, x: Tensor4) -> None:
    atomic_write_bytes(path, tensor_to_bytes(x))


def load_tensor(path) -> Tensor4:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
