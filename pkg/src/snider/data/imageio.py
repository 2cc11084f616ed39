"""Binary PPM (P6) / PGM (P5) files with maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def _write(path: Path, magic: bytes, body: np.ndarray, h: int, w: int) -> None:
    header = magic + b"\n%d %d\n255\n" % (w, h)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + np.ascontiguousarray(body).tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) image; floats in [0, 1] are rounded to 8 bits."""
    px = to_uint8(image)
    if px.ndim != 3 or px.shape[0] != 3:
        raise ValueError(f"PPM needs a (3, H, W) image, got {px.shape}")
    _write(path, b"P6", px.transpose(1, 2, 0), px.shape[1], px.shape[2])


def write_pgm(path, image: np.ndarray) -> None:
    """Write a (H, W) or (1, H, W) gray image; floats in [0, 1] are rounded to 8 bits."""
    px = to_uint8(image)
    if px.ndim == 3 and px.shape[0] == 1:
        px = px[0]
    if px.ndim != 2:
        raise ValueError(f"PGM needs a (H, W) image, got {px.shape}")
    _write(path, b"P5", px, px.shape[0], px.shape[1])


def _read(path) -> tuple[bytes, int, int, np.ndarray]:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    return magic, h, w, np.frombuffer(raw, dtype=np.uint8, offset=pos)


def read_ppm_uint8(path) -> np.ndarray:
    magic, h, w, body = _read(path)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    if body.size != h * w * 3:
        raise ValueError(f"{path}: expected {h * w * 3} pixel bytes, found {body.size}")
    return body.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm_uint8(path) -> np.ndarray:
    magic, h, w, body = _read(path)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    if body.size != h * w:
        raise ValueError(f"{path}: expected {h * w} pixel bytes, found {body.size}")
    return body.reshape(h, w).copy()


def read_ppm(path) -> np.ndarray:
    """(3, H, W) float32 in [0, 1]."""
    return read_ppm_uint8(path).astype(np.float32) / np.float32(255)


def read_pgm(path) -> np.ndarray:
    """(H, W) float32 in [0, 1]."""
    return read_pgm_uint8(path).astype(np.float32) / np.float32(255)
