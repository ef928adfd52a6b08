"""Raster container, PGM/PPM/JPEG file access and bilinear resampling."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ChannelMismatch, CorruptStream, IoFailure, UnsupportedFormat, ZeroDimension


class ImageFormat(str, enum.Enum):
    PGM = "PGM"
    PPM = "PPM"
    JPEG = "JPEG-baseline"


@dataclass(frozen=True, eq=False)
class Raster:
    """An 8-bit image stored as a ``(height, width, channels)`` uint8 array.

    ``channels`` is 1 (luma) or 3 (RGB). The flat row-major view is
    ``raster.pixels.ravel()``.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ChannelMismatch(f"expected (h, w, 1|3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ZeroDimension(f"raster dimensions must be >= 1, got {px.shape[:2]}")
        if px.dtype != np.uint8:
            if np.issubdtype(px.dtype, np.floating) and not np.all(np.isfinite(px)):
                raise ValueError("non-finite pixel values")
            if px.min() < 0 or px.max() > 255:
                raise ValueError("pixel samples must lie in [0, 255]")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_flat(cls, width: int, height: int, channels: int, samples) -> "Raster":
        flat = np.asarray(samples)
        if flat.size != width * height * channels:
            raise ValueError(
                f"sample count {flat.size} != {width}*{height}*{channels}"
            )
        return cls(flat.reshape(height, width, channels))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self):
        return self.pixels.shape

    def flat(self) -> list[int]:
        return self.pixels.ravel().tolist()

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"Raster({self.width}x{self.height}x{self.channels})"


# ---------------------------------------------------------------- PNM ----

def _pnm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace separated header tokens, skipping comments."""
    tokens = []
    i = 2
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise CorruptStream("truncated PNM header")
        tokens.append(data[start:i])
    # exactly one whitespace byte separates the header from the raster
    if i >= n or not data[i:i + 1].isspace():
        raise CorruptStream("truncated PNM header")
    return tokens, i + 1


def decode_pnm(data: bytes) -> Raster:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormat(f"not a binary PGM/PPM stream (magic {magic!r})")
    channels = 1 if magic == b"P5" else 3
    try:
        tokens, offset = _pnm_tokens(data, 3)
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise CorruptStream(f"bad PNM header: {exc}") from None
    if maxval != 255:
        raise UnsupportedFormat(f"only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise CorruptStream("PNM dimensions must be positive")
    size = width * height * channels
    body = data[offset:offset + size]
    if len(body) != size:
        raise CorruptStream(f"PNM raster truncated: {len(body)} of {size} bytes")
    return Raster(np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels))


def encode_pnm(r: Raster) -> bytes:
    magic = b"P5" if r.channels == 1 else b"P6"
    header = magic + f"\n{r.width} {r.height}\n255\n".encode("ascii")
    return header + r.pixels.tobytes()


# --------------------------------------------------------------- files ----

def load_image(path) -> Raster:
    """Load a PGM (P5), PPM (P6) or baseline JPEG file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if data[:2] in (b"P5", b"P6"):
        return decode_pnm(data)
    if data[:2] == b"\xff\xd8":
        from .jpeg import jpeg_decode

        return jpeg_decode(data)
    raise UnsupportedFormat(f"{path}: unrecognized image signature")


def save_image(r: Raster, path, fmt: ImageFormat | str = ImageFormat.PGM, quality: int = 75) -> None:
    """Write ``r`` to ``path``; PGM/PPM are lossless, JPEG uses ``quality``."""
    fmt = ImageFormat(fmt)
    if fmt is ImageFormat.PGM and r.channels != 1:
        raise ChannelMismatch("PGM requires a 1-channel raster")
    if fmt is ImageFormat.PPM and r.channels != 3:
        raise ChannelMismatch("PPM requires a 3-channel raster")
    if fmt is ImageFormat.JPEG:
        from .jpeg import jpeg_encode

        data = jpeg_encode(r, quality)
    else:
        data = encode_pnm(r)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def format_for_raster(r: Raster) -> ImageFormat:
    return ImageFormat.PGM if r.channels == 1 else ImageFormat.PPM


# ------------------------------------------------------------ resample ----

def _axis_weights(src: int, dst: int):
    """Half-pixel-centre bilinear taps along one axis with clamped borders."""
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def resize(r: Raster, w: int, h: int, filter: str = "bilinear") -> Raster:
    """Bilinear resample to exactly ``w`` x ``h``."""
    if w < 1 or h < 1:
        raise ZeroDimension(f"target size must be >= 1, got {w}x{h}")
    if filter != "bilinear":
        raise ValueError(f"unsupported filter {filter!r}")
    src = r.pixels.astype(np.float64)
    ylo, yhi, fy = _axis_weights(r.height, h)
    xlo, xhi, fx = _axis_weights(r.width, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[ylo][:, xlo] * (1.0 - fx) + src[ylo][:, xhi] * fx
    bot = src[yhi][:, xlo] * (1.0 - fx) + src[yhi][:, xhi] * fx
    out = top * (1.0 - fy) + bot * fy
    return Raster(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def to_gray(r: Raster) -> Raster:
    if r.channels == 1:
        return r
    px = r.pixels.astype(np.float64)
    y = 0.299 * px[..., 0] + 0.587 * px[..., 1] + 0.114 * px[..., 2]
    return Raster(np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8))
