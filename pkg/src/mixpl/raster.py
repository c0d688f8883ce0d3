"""8-bit RGB rasters with explicit padding state, plus raw and PNG I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

RAW_MAGIC = b"MXPL"
_RAW_HEADER = struct.Struct("<4sIIB")


@dataclass(frozen=True, eq=False)
class ImageRaster:
    """An H x W x 3 uint8 image.

    ``width``/``height`` always describe the content. When ``pad_state`` is
    set to ``(target_w, target_h)`` the array has the target shape and the
    content occupies its top-left corner; everything else is 0.
    """
    data: np.ndarray
    width: int
    height: int
    pad_state: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if data.dtype != np.uint8 or data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"raster must be HxWx3 uint8, got {data.dtype} {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        stored_w, stored_h = self.pad_state if self.pad_state else (self.width, self.height)
        if data.shape[:2] != (stored_h, stored_w):
            raise ValueError(
                f"data shape {data.shape[:2]} does not match stored size {stored_w}x{stored_h}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageRaster":
        arr = np.asarray(arr)
        return cls(arr, arr.shape[1], arr.shape[0])

    @property
    def size(self) -> Tuple[int, int]:
        return (self.width, self.height)

    @property
    def padded(self) -> bool:
        return self.pad_state is not None

    def __eq__(self, other):
        if not isinstance(other, ImageRaster):
            return NotImplemented
        return (self.size == other.size and self.pad_state == other.pad_state
                and np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"ImageRaster({self.width}x{self.height}, pad_state={self.pad_state})"


def pad_to(r: ImageRaster, w: int, h: int) -> ImageRaster:
    """Zero-fill ``r`` at the bottom/right up to ``w`` x ``h``."""
    if r.padded:
        raise ValueError("raster is already padded; unpad first")
    if w < r.width or h < r.height:
        raise ValueError(f"pad target {w}x{h} smaller than raster {r.width}x{r.height}")
    out = np.zeros((h, w, 3), dtype=np.uint8)
    out[:r.height, :r.width] = r.data
    return ImageRaster(out, r.width, r.height, (w, h))


def unpad(r: ImageRaster) -> ImageRaster:
    if not r.padded:
        raise ValueError("raster is not padded")
    return ImageRaster(r.data[:r.height, :r.width].copy(), r.width, r.height)


def pad_batch(rasters) -> list:
    """Pad every raster to the batch-wide max width/height."""
    rasters = list(rasters)
    if not rasters:
        return []
    w = max(r.width for r in rasters)
    h = max(r.height for r in rasters)
    return [pad_to(r, w, h) for r in rasters]


def to_bytes(r: ImageRaster) -> bytes:
    if r.padded:
        r = unpad(r)
    return _RAW_HEADER.pack(RAW_MAGIC, r.width, r.height, 3) + r.data.tobytes()


def from_bytes(buf: bytes) -> ImageRaster:
    if len(buf) < _RAW_HEADER.size:
        raise ValueError("truncated raw raster header")
    magic, w, h, c = _RAW_HEADER.unpack_from(buf)
    if magic != RAW_MAGIC:
        raise ValueError(f"bad raw raster magic {magic!r}")
    if c != 3:
        raise ValueError(f"unsupported channel count {c}")
    body = buf[_RAW_HEADER.size:]
    if len(body) != w * h * c:
        raise ValueError(f"raw raster body has {len(body)} bytes, expected {w * h * c}")
    data = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).copy()
    return ImageRaster(data, w, h)


def write_raw(r: ImageRaster, path) -> None:
    Path(path).write_bytes(to_bytes(r))


def read_raw(path) -> ImageRaster:
    return from_bytes(Path(path).read_bytes())


def write_png(r: ImageRaster, path) -> None:
    from PIL import Image

    if r.padded:
        r = unpad(r)
    Image.fromarray(r.data, mode="RGB").save(path, format="PNG")


def read_png(path) -> ImageRaster:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImageRaster.from_array(arr.copy())
