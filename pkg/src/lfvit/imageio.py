"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""

import os

import numpy as np

from lfvit.errors import DimensionError, ImageFormatError

_WHITESPACE = b" \t\r\n\v\f"


def _header_fields(data: bytes, count: int):
    """Read ``count`` whitespace-separated header fields, skipping comments.

    Returns the fields and the offset of the first payload byte (after the
    single whitespace character that terminates the last field).
    """
    fields = []
    pos = 0
    n = len(data)
    while len(fields) < count:
        while pos < n and data[pos] in _WHITESPACE:
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header: unexpected end of file")
        fields.append(data[start:pos])
    if pos >= n or data[pos] not in _WHITESPACE:
        raise ImageFormatError("malformed header: missing whitespace before payload")
    return fields, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes to uint8 of shape (H, W) or (H, W, 3)."""
    if data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"malformed header: unsupported magic {data[:2]!r}, expected P5 or P6")
    fields, start = _header_fields(data, 4)
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageFormatError(f"malformed header: non-integer field in {fields[1:]}") from exc
    if width < 1 or height < 1:
        raise ImageFormatError(f"malformed header: invalid size {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}; only 255 is accepted")
    channels = 3 if data[:2] == b"P6" else 1
    expected = width * height * channels
    payload = data[start:start + expected]
    if len(payload) < expected:
        raise ImageFormatError(f"truncated payload: expected {expected} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    return pixels.reshape(height, width, 3) if channels == 3 else pixels.reshape(height, width)


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def encode_pgm(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def to_tensor(pixels: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return (pixels.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()


def to_pixels(image) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8, rounding to nearest."""
    image = np.asarray(image, dtype=np.float64)
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def load_image(path, side: int = None) -> np.ndarray:
    """Read a P6 file as a (3, S, S) float32 tensor.

    No resizing is done: the file must already be ``side`` x ``side``.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P6":
        raise ImageFormatError(f"{os.fspath(path)}: malformed header: expected binary PPM (P6)")
    pixels = decode_pnm(data)
    h, w, _ = pixels.shape
    if side is not None and (h, w) != (side, side):
        raise DimensionError(f"{os.fspath(path)}: image is {w}x{h}, expected {side}x{side}")
    if h != w:
        raise DimensionError(f"{os.fspath(path)}: image is {w}x{h}, expected a square image")
    return to_tensor(pixels)


def save_image(path, image) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(to_pixels(image)))
