"""5x7 bitmap digits used by both the plate renderer and the recognizer."""

from __future__ import annotations

import numpy as np

GLYPH_ROWS = 7
GLYPH_COLS = 5

_DIGITS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def glyph_bitmap(char: str, scale: int = 1) -> np.ndarray:
    """Binary (7*scale, 5*scale) uint8 array for ``char``."""
    rows = _DIGITS[char]
    base = np.array([[c == "1" for c in row] for row in rows], dtype=np.uint8)
    return np.kron(base, np.ones((scale, scale), dtype=np.uint8))


def digit_glyphs(scale: int = 1) -> dict[str, np.ndarray]:
    """The ten digit glyphs at the given integer scale."""
    if scale < 1:
        raise ValueError(f"glyph scale must be >= 1, got {scale}")
    return {c: glyph_bitmap(c, scale) for c in sorted(_DIGITS)}
