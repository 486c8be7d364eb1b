"""Frames, masks and probability maps, their netpbm file formats, and the
resampling primitives the rest of the package builds on.

All rasters are thin frozen wrappers around row-major numpy arrays:
``Frame.data`` is ``(h, w, 3) uint8``, ``GrayRaster.data`` is ``(h, w) float64``,
``MaskMap.data`` is ``(h, w) int32`` and ``ProbMap.data`` is ``(h, w, C+1) float64``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    FormatError,
    IndexOverflowError,
    MaxvalError,
    TruncatedFileError,
)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class Frame:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3 or d.shape[2] != 3 or d.shape[0] < 1 or d.shape[1] < 1:
            raise DimensionError(f"frame data must be (h>=1, w>=1, 3), got {d.shape}")
        d = np.ascontiguousarray(d, dtype=np.uint8)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, Frame) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class GrayRaster:
    data: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float64)
        if d.ndim != 2 or d.size == 0:
            raise DimensionError(f"gray raster must be a non-empty 2-D array, got {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class MaskMap:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2 or d.size == 0:
            raise DimensionError(f"mask must be a non-empty 2-D array, got {d.shape}")
        if d.min() < 0:
            raise DimensionError("class indices must be non-negative")
        d = np.ascontiguousarray(d, dtype=np.int32)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, MaskMap) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class ProbMap:
    data: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] < 1:
            raise DimensionError(f"prob map must be (h, w, classes), got {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def classes(self) -> int:
        return self.data.shape[2]

    def argmax(self) -> MaskMap:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class index
        return MaskMap(np.argmax(self.data, axis=2))

    @classmethod
    def one_hot(cls, mask: MaskMap, classes: int) -> "ProbMap":
        if int(mask.data.max()) >= classes:
            raise DimensionError(f"mask index {int(mask.data.max())} >= {classes} classes")
        return cls(np.eye(classes)[mask.data])


# --------------------------------------------------------------------------- netpbm


def _read_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Parse a binary netpbm header; returns (width, height, maxval, payload offset)."""
    if len(buf) < 2 or buf[:2] != magic:
        found = buf[:2].decode("latin-1", "replace")
        raise FormatError(f"expected magic {magic.decode()}, found {found!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments between tokens
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header: expected an unsigned integer")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("malformed header: missing whitespace after maxval")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"malformed header: dimensions {width}x{height}")
    if maxval != 255:
        raise MaxvalError(f"maxval must be 255, got {maxval}")
    return width, height, maxval, pos + 1


def _read_payload(buf: bytes, offset: int, count: int) -> np.ndarray:
    available = len(buf) - offset
    if available < count:
        raise TruncatedFileError(f"payload truncated: expected {count} bytes, found {available}")
    if available > count:
        raise FormatError(f"{available - count} trailing bytes after payload")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=offset)


def decode_ppm(buf: bytes) -> Frame:
    w, h, _, off = _read_header(buf, b"P6")
    return Frame(_read_payload(buf, off, w * h * 3).reshape(h, w, 3))


def encode_ppm(frame: Frame) -> bytes:
    return b"P6\n%d %d\n255\n" % (frame.width, frame.height) + frame.data.tobytes()


def decode_pgm(buf: bytes) -> MaskMap:
    w, h, _, off = _read_header(buf, b"P5")
    return MaskMap(_read_payload(buf, off, w * h).reshape(h, w))


def encode_pgm(mask: MaskMap) -> bytes:
    top = int(mask.data.max())
    if top > 255:
        raise IndexOverflowError(f"class index {top} does not fit in 8 bits")
    return b"P5\n%d %d\n255\n" % (mask.width, mask.height) + mask.data.astype(np.uint8).tobytes()


def load_frame(path) -> Frame:
    return decode_ppm(Path(path).read_bytes())


def save_frame(frame: Frame, path) -> None:
    Path(path).write_bytes(encode_ppm(frame))


def load_mask(path) -> MaskMap:
    return decode_pgm(Path(path).read_bytes())


def save_mask(mask: MaskMap, path) -> None:
    Path(path).write_bytes(encode_pgm(mask))


# --------------------------------------------------------------------------- resampling


def to_grayscale(frame: Frame) -> GrayRaster:
    return GrayRaster(frame.data.astype(np.float64) @ LUMA_WEIGHTS)


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of overlap fractions; each row sums to one."""
    scale = n_in / n_out
    edges = np.arange(n_out + 1) * scale
    lo, hi = edges[:-1, None], edges[1:, None]
    src = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, src + 1) - np.maximum(lo, src), 0.0, None)
    return overlap / scale


def resize_area(g: GrayRaster, out_w: int, out_h: int) -> GrayRaster:
    """Area-averaging resize: every output pixel is the coverage-weighted mean
    of the source pixels under its back-projected rectangle."""
    if out_w < 1 or out_h < 1:
        raise DimensionError(f"output dimensions must be >= 1, got {out_w}x{out_h}")
    rows = _area_weights(g.height, out_h)
    cols = _area_weights(g.width, out_w)
    return GrayRaster(rows @ g.data @ cols.T)


def pad_replicate(frame: Frame, target_w: int, target_h: int) -> Frame:
    if target_w < frame.width or target_h < frame.height:
        raise DimensionError(
            f"target {target_w}x{target_h} smaller than source {frame.width}x{frame.height}"
        )
    if (target_w, target_h) == (frame.width, frame.height):
        return frame
    pad = ((0, target_h - frame.height), (0, target_w - frame.width), (0, 0))
    return Frame(np.pad(frame.data, pad, mode="edge"))
