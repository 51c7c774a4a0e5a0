"""Binary PPM (P6, maxval 255) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from sentinet.errors import DataError


def _header_tokens(data: bytes):
    """Yield (token, end_offset) for the 4 header fields, skipping comments."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"truncated PPM header at byte offset {pos}")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def decode_ppm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    if data[:2] != b"P6":
        raise DataError(f"{name}: unsupported format {data[:2]!r}, only binary PPM (P6) is read")
    tokens, offset = _header_tokens(data)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{name}: malformed PPM header {tokens!r}") from None
    if maxval != 255:
        raise DataError(f"{name}: unsupported maxval {maxval}, only 255 is read")
    if width < 1 or height < 1:
        raise DataError(f"{name}: empty image {width}x{height}")
    need = width * height * 3
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise DataError(
            f"{name}: truncated payload at byte offset {offset + len(payload)} "
            f"(expected {need} bytes of pixels from offset {offset})"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataError(f"PPM needs an (H, W, 3) uint8 array, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def load_image(path) -> np.ndarray:
    """Read a P6 file into an (H, W, 3) uint8 array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"image file not found: {path}") from None
    return decode_ppm(data, str(path))


def save_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))
