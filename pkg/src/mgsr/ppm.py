"""Binary PPM (P6, 8-bit) image files for channel-first float images."""

from __future__ import annotations

import numpy as np


def write_ppm(path, img: np.ndarray) -> None:
    """Store a (3, H, W) float image in [0, 1] as an 8-bit P6 file."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {img.shape}")
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    u8 = np.rint(arr * 255.0).astype(np.uint8)
    _, h, w = u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(u8.transpose(1, 2, 0).tobytes(order="C"))


def _tokens(blob: bytes):
    """Header fields: whitespace-separated, '#' comments run to end of line."""
    i = 0
    while True:
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i:i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError("unexpected end of header")
        yield blob[start:i].decode("ascii"), i


def read_ppm(path) -> np.ndarray:
    """Load an 8-bit P6 file as a (3, H, W) float32 image in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = _tokens(blob)
    magic, _ = next(fields)
    if magic != "P6":
        raise ValueError(f"not a binary PPM file (magic {magic!r})")
    (w, _), (h, _), (maxval, end) = (next(fields) for _ in range(3))
    w, h, maxval = int(w), int(h), int(maxval)
    if w < 1 or h < 1:
        raise ValueError(f"bad dimensions {w}x{h}")
    if maxval != 255:
        raise ValueError(f"only 8-bit files supported, maxval {maxval}")
    start = end + 1  # exactly one whitespace byte after maxval
    need = w * h * 3
    pixels = blob[start:start + need]
    if len(pixels) != need or start + need != len(blob):
        raise ValueError(f"payload must be exactly {need} bytes")
    u8 = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return (u8.transpose(2, 0, 1).astype(np.float32) / 255.0)
