"""Binary PPM (P6) image files, nearest-neighbor letterboxing, and a minimal
PNG encoder used to inline pixels into SVG overlays."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .encoders import Image
from .geometry import Letterbox

PAD_GRAY = 114  # letterbox padding value, all three channels


class ImageIOError(OSError):
    """Raised on unreadable or malformed image files."""


def to_uint8(img: Image) -> np.ndarray:
    return np.rint(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(rgb: np.ndarray) -> Image:
    h, w, _ = rgb.shape
    return Image(width=w, height=h, pixels=rgb.astype(np.float64) / 255.0)


def write_ppm(path: str | Path, img: Image) -> None:
    rgb = to_uint8(img)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path: str | Path) -> Image:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise ImageIOError(f"cannot read image {path}: {err}") from err
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:  # magic, width, height, maxval
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if fields[0] != b"P6":
        raise ImageIOError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ImageIOError(f"{path}: unsupported maxval {maxval}")
    expected = width * height * 3
    data = raw[pos:pos + expected]
    if len(data) != expected:
        raise ImageIOError(f"{path}: truncated pixel data")
    rgb = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return from_uint8(rgb)


def letterbox_image(img: Image, dst_w: int, dst_h: int) -> tuple[Image, Letterbox]:
    """Nearest-neighbor resample into a centered letterbox frame."""
    box = Letterbox(src_w=img.width, src_h=img.height, dst_w=dst_w, dst_h=dst_h)
    s = box.scale
    out_w = int(round(img.width * s))
    out_h = int(round(img.height * s))
    xs = np.clip(((np.arange(out_w) + 0.5) / s).astype(np.int64), 0, img.width - 1)
    ys = np.clip(((np.arange(out_h) + 0.5) / s).astype(np.int64), 0, img.height - 1)
    resized = img.pixels[ys][:, xs]
    canvas = np.full((dst_h, dst_w, 3), PAD_GRAY / 255.0, dtype=np.float64)
    ox = int(round(box.offset_x))
    oy = int(round(box.offset_y))
    canvas[oy:oy + out_h, ox:ox + out_w] = resized
    return Image(width=dst_w, height=dst_h, pixels=canvas), box


def png_bytes(rgb: np.ndarray) -> bytes:
    """Encode an RGB uint8 array as a PNG (filter 0, fixed zlib level)."""
    h, w, _ = rgb.shape

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    scanlines = b"".join(b"\x00" + rgb[y].tobytes() for y in range(h))
    return (b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", header)
            + chunk(b"IDAT", zlib.compress(scanlines, 6))
            + chunk(b"IEND", b""))
