"""Pixel containers, raster file I/O, and bilinear sampling.

Images are H x W x 3 float64 arrays with every channel in [0, 1], row-major,
top-left origin, y increasing downward.  Values stay floating point inside
the pipeline and are quantized to 8 bits only at file boundaries.  Binary PPM
(P6) is the bit-exact interchange format; PNG works behind the same two
operations when the path ends in ``.png``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ImageIOError,
    InputError,
    MalformedImageError,
    MissingImageError,
    UnsupportedImageError,
)


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Immutable H x W x 3 image with channel intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InputError(f"image data must be H x W x 3, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InputError("image must have at least one row and one column")
        if not np.isfinite(arr).all():
            raise InputError("image data contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InputError(
                f"image values outside [0, 1]: min={arr.min():.6g} max={arr.max():.6g}"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_array(cls, arr, clip: bool = False) -> "ImageBuffer":
        """Wrap an array; with ``clip=True`` values are clamped into [0, 1] first."""
        arr = np.asarray(arr, dtype=np.float64)
        if clip:
            arr = np.clip(arr, 0.0, 1.0)
        return cls(arr)

    @classmethod
    def full(cls, height: int, width: int, value=0.0) -> "ImageBuffer":
        return cls(np.full((height, width, 3), value, dtype=np.float64))

    def allclose(self, other: "ImageBuffer", atol: float = 0.0) -> bool:
        return self.data.shape == other.data.shape and bool(
            np.allclose(self.data, other.data, rtol=0.0, atol=atol)
        )


@dataclass(frozen=True)
class Point2:
    """Real-valued pixel coordinate; x runs along columns, y along rows."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InputError(f"point coordinates must be finite, got ({self.x}, {self.y})")


def load_image(path) -> ImageBuffer:
    """Load a PPM (P6) or PNG file into an ImageBuffer scaled to [0, 1]."""
    p = Path(path)
    if not p.is_file():
        raise MissingImageError(f"no such image file: {p}")
    suffix = p.suffix.lower()
    if suffix == ".png":
        return _load_png(p)
    raw = p.read_bytes()
    if raw[:2] == b"P6":
        return _load_ppm(p, raw)
    raise UnsupportedImageError(f"unsupported raster format: {p}")


def save_image(img: ImageBuffer, path) -> None:
    """Write an ImageBuffer quantized to 8 bits per channel (round half up)."""
    p = Path(path)
    if not p.parent.is_dir():
        raise ImageIOError(f"parent directory does not exist: {p}")
    bytes_ = quantize_u8(img.data)
    if p.suffix.lower() == ".png":
        _save_png(bytes_, p)
        return
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    p.write_bytes(header + bytes_.tobytes())


def quantize_u8(arr: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8 with round-half-up, so 0.5 maps to byte 128."""
    return np.floor(np.asarray(arr) * 255.0 + 0.5).astype(np.uint8)


def _ppm_tokens(raw: bytes, path: Path):
    """Header tokens per the PPM spec: whitespace separated, # to EOL comments."""
    pos = 0
    tokens = []
    while len(tokens) < 4 and pos < len(raw):
        ch = raw[pos : pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            eol = raw.find(b"\n", pos)
            if eol < 0:
                raise MalformedImageError(f"unterminated comment in header: {path}")
            pos = eol + 1
        else:
            end = pos
            while end < len(raw) and raw[end : end + 1] not in b" \t\r\n":
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    if len(tokens) < 4:
        raise MalformedImageError(f"truncated PPM header: {path}")
    return tokens, pos + 1  # single whitespace byte after maxval


def _load_ppm(path: Path, raw: bytes) -> ImageBuffer:
    tokens, offset = _ppm_tokens(raw, path)
    if tokens[0] != b"P6":
        raise MalformedImageError(f"not a binary PPM (P6) file: {path}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise MalformedImageError(f"non-numeric PPM header field: {path}") from None
    if maxval != 255:
        raise UnsupportedImageError(f"unsupported bit depth (maxval {maxval}): {path}")
    expected = width * height * 3
    pixels = raw[offset : offset + expected]
    if len(pixels) != expected:
        raise MalformedImageError(
            f"PPM pixel data truncated ({len(pixels)} of {expected} bytes): {path}"
        )
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return ImageBuffer(arr.astype(np.float64) / 255.0)


def _load_png(path: Path) -> ImageBuffer:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise UnsupportedImageError(f"unsupported PNG mode {im.mode!r}: {path}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError:
        raise MalformedImageError(f"malformed PNG file: {path}") from None
    return ImageBuffer(arr.astype(np.float64) / 255.0)


def _save_png(bytes_: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(bytes_, mode="RGB").save(path, format="PNG")


def sample_bilinear(img: ImageBuffer, p: Point2, fill=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Bilinear interpolation of the four neighbors of ``p``.

    Neighbors outside the pixel grid contribute the ``fill`` color weighted by
    their bilinear weight, so a point more than one pixel outside the image
    returns exactly ``fill`` and points straddling the border blend into it.
    The result is an affine combination of pixel values, which keeps the
    operation linear in the image (the property the warp operators rely on).
    """
    return sample_bilinear_array(img.data, p.x, p.y, fill)


def sample_bilinear_array(data: np.ndarray, x: float, y: float, fill=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Array-level bilinear sampling; values need not lie in [0, 1]."""
    h, w = data.shape[0], data.shape[1]
    x0 = math.floor(x)
    y0 = math.floor(y)
    fx = x - x0
    fy = y - y0
    weights = (
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    )
    acc = np.zeros(data.shape[2], dtype=np.float64)
    wsum = 0.0
    for xi, yi, wt in weights:
        if 0 <= xi < w and 0 <= yi < h:
            acc = acc + wt * data[yi, xi]
            wsum += wt
    if wsum != 1.0:
        acc = acc + (1.0 - wsum) * np.asarray(fill, dtype=np.float64)
    return acc
