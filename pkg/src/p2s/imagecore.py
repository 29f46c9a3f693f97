"""Canonical grayscale image representation and bit-exact file I/O.

Images are single-channel 2-D intensity fields stored as 64-bit floats in
normalized units.  Supported on-disk formats are binary/ASCII portable
graymaps (P5/P2, maxval 255 or 65535) and 8/16-bit grayscale PNG.  The
writer is deterministic: identical pixel data produces identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class ImageError(Exception):
    """Base class for image I/O and validation failures."""


class UnsupportedImageFormat(ImageError):
    """File is not a P2/P5 graymap or a grayscale PNG."""


class CorruptImageHeader(ImageError):
    """Header present but malformed (bad magic fields, maxval, token soup)."""


class ImageDimensionMismatch(ImageError):
    """Pixel payload disagrees with the dimensions promised by the header."""


class DegenerateImage(ImageError):
    """Image content makes the requested operation meaningless (e.g. all zero)."""


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Immutable single-channel image: ``data`` is a read-only H x W float64 array."""

    data: np.ndarray
    height: int = field(init=False)
    width: int = field(init=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"ImageGrid needs a 2-D array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("ImageGrid values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "height", arr.shape[0])
        object.__setattr__(self, "width", arr.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def as_array(self) -> np.ndarray:
        """Read-only view of the pixel data."""
        return self.data


def _tokens(raw: bytes):
    """Yield whitespace-separated header tokens, skipping '#' comments."""
    pos = 0
    n = len(raw)
    while pos < n:
        c = raw[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            end = raw.find(b"\n", pos)
            pos = n if end < 0 else end + 1
        else:
            end = pos
            while end < n and not raw[end : end + 1].isspace():
                end += 1
            yield pos, raw[pos:end]
            pos = end


def _parse_pgm(raw: bytes, path: str) -> ImageGrid:
    gen = _tokens(raw)
    try:
        _, magic = next(gen)
        _, w_tok = next(gen)
        _, h_tok = next(gen)
        maxval_pos, maxval_tok = next(gen)
    except StopIteration:
        raise CorruptImageHeader(f"{path}: truncated PGM header")
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    except ValueError:
        raise CorruptImageHeader(f"{path}: non-numeric PGM header fields")
    if width < 1 or height < 1:
        raise CorruptImageHeader(f"{path}: bad dimensions {width}x{height}")
    if maxval not in (255, 65535):
        raise CorruptImageHeader(f"{path}: maxval {maxval} not supported (255 or 65535)")
    count = width * height

    if magic == b"P2":
        vals = []
        for _, tok in gen:
            try:
                vals.append(int(tok))
            except ValueError:
                raise CorruptImageHeader(f"{path}: non-numeric P2 sample {tok!r}")
        if len(vals) != count:
            raise ImageDimensionMismatch(
                f"{path}: expected {count} samples, found {len(vals)}"
            )
        samples = np.array(vals, dtype=np.float64)
        if samples.min() < 0 or samples.max() > maxval:
            raise CorruptImageHeader(f"{path}: sample outside [0, {maxval}]")
    elif magic == b"P5":
        # Binary payload starts one whitespace byte after the maxval token.
        start = maxval_pos + len(maxval_tok) + 1
        payload = raw[start:]
        bytes_per = 1 if maxval < 256 else 2
        if len(payload) != count * bytes_per:
            raise ImageDimensionMismatch(
                f"{path}: expected {count * bytes_per} payload bytes, found {len(payload)}"
            )
        dtype = np.uint8 if bytes_per == 1 else np.dtype(">u2")
        samples = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    else:
        raise UnsupportedImageFormat(f"{path}: magic {magic!r} is not P2/P5")

    return ImageGrid(samples.reshape(height, width) / float(maxval))


def _parse_png(path: str) -> ImageGrid:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                maxval = 255.0
            elif mode in ("I;16", "I;16B", "I"):
                maxval = 65535.0
            else:
                raise UnsupportedImageFormat(
                    f"{path}: PNG mode {mode!r} is not 8/16-bit grayscale"
                )
            arr = np.asarray(im, dtype=np.float64)
    except UnsupportedImageFormat:
        raise
    except Exception as exc:
        raise CorruptImageHeader(f"{path}: unreadable PNG ({exc})")
    if arr.ndim != 2:
        raise UnsupportedImageFormat(f"{path}: PNG is not single-channel")
    if arr.min() < 0 or arr.max() > maxval:
        raise CorruptImageHeader(f"{path}: PNG samples outside [0, {maxval}]")
    return ImageGrid(arr / maxval)


def load_image(path: str | Path) -> ImageGrid:
    """Load a P2/P5 graymap or grayscale PNG; pixel p maps to p / maxval."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] in (b"P2", b"P5"):
        return _parse_pgm(raw, str(path))
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        return _parse_png(str(path))
    raise UnsupportedImageFormat(f"{path}: unrecognized magic bytes {raw[:2]!r}")


def _quantize(img: ImageGrid, maxval: int) -> np.ndarray:
    # Clamp, then round half away from zero (values are nonnegative after clamp).
    clamped = np.clip(img.data, 0.0, 1.0)
    return np.floor(clamped * maxval + 0.5)


def save_image(img: ImageGrid, path: str | Path, depth: int = 8) -> None:
    """Write ``img`` as binary PGM (.pgm/.pnm) or PNG (.png) at 8 or 16 bits.

    Values are clamped to [0, 1] and quantized with round-half-away-from-zero.
    Output bytes are a pure function of the pixel data.
    """
    if depth not in (8, 16):
        raise ValueError(f"depth must be 8 or 16, got {depth}")
    path = Path(path)
    maxval = 255 if depth == 8 else 65535
    q = _quantize(img, maxval)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".pnm"):
        header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
        dtype = np.uint8 if depth == 8 else np.dtype(">u2")
        path.write_bytes(header + q.astype(dtype).tobytes())
    elif suffix == ".png":
        if depth == 8:
            pil = Image.fromarray(q.astype(np.uint8))
        else:
            pil = Image.frombytes("I;16", (img.width, img.height),
                                  q.astype("<u2").tobytes())
        pil.save(path, format="PNG")
    else:
        raise UnsupportedImageFormat(f"{path}: cannot infer format from suffix")


def normalize(img: ImageGrid) -> ImageGrid:
    """Scale so the maximum is exactly 1.  All-zero input is rejected."""
    peak = float(img.data.max())
    if peak <= 0.0:
        raise DegenerateImage("cannot normalize an image with no positive values")
    return ImageGrid(img.data / peak)


def concentric_phantom(height: int = 128, width: int = 128) -> ImageGrid:
    """Deterministic piecewise-smooth test image: nested ellipses, 4 levels."""
    r = (np.arange(height, dtype=np.float64)[:, None] - (height - 1) / 2) / height
    c = (np.arange(width, dtype=np.float64)[None, :] - (width - 1) / 2) / width
    img = np.full((height, width), 0.25)
    # (semi-axis row, semi-axis col, level), outermost first.
    for ar, ac, level in ((0.42, 0.34, 0.5), (0.29, 0.22, 0.75), (0.15, 0.11, 1.0)):
        img[(r / ar) ** 2 + (c / ac) ** 2 <= 1.0] = level
    return ImageGrid(img)


def crop_even(img: ImageGrid) -> ImageGrid:
    """Drop the last row/column as needed so both dimensions are even."""
    h = img.height - (img.height % 2)
    w = img.width - (img.width % 2)
    if h == img.height and w == img.width:
        return img
    if h < 2 or w < 2:
        raise DegenerateImage("image too small to crop to even dimensions")
    return ImageGrid(img.data[:h, :w])
