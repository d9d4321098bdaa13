"""Dense rasters and the TCN1 binary container used for every map on disk.

TCN1 layout: ``b"TCN1"``, then height, width, channels as little-endian
uint32, then height*width*channels little-endian float32 values, row-major
with the channel index varying fastest.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"TCN1"
_HEADER = struct.Struct("<4sIII")


class RasterFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RasterMap:
    """A (height, width, channels) float grid."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"raster data must be 2-D or 3-D, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, height: int, width: int, channels: int = 1) -> "RasterMap":
        return cls(np.zeros((height, width, channels)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """The (H, W) view of a single-channel raster."""
        if self.channels != 1:
            raise ValueError("plane is only defined for single-channel rasters")
        return self.data[:, :, 0]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __eq__(self, other) -> bool:
        return isinstance(other, RasterMap) and np.array_equal(self.data, other.data)

    def to_bytes(self) -> bytes:
        h, w, c = self.data.shape
        body = np.ascontiguousarray(self.data, dtype="<f4").tobytes()
        return _HEADER.pack(MAGIC, h, w, c) + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RasterMap":
        if len(blob) < _HEADER.size:
            raise RasterFormatError("file too short for a TCN1 header")
        magic, h, w, c = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise RasterFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        expected = _HEADER.size + 4 * h * w * c
        if len(blob) != expected:
            raise RasterFormatError(f"payload size {len(blob)} does not match header ({expected})")
        arr = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
        return cls(arr.astype(np.float64))


def atomic_write(path: str | os.PathLike, payload: bytes | str) -> None:
    """Write through a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tcn(path: str | os.PathLike, raster: RasterMap) -> None:
    atomic_write(path, raster.to_bytes())


def read_tcn(path: str | os.PathLike) -> RasterMap:
    return RasterMap.from_bytes(Path(path).read_bytes())
