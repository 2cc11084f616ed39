"""Synthetic plate rendering and training-label generation.

One clean plate produces four training samples, one per rotation angle.
Each sample carries the unrotated clean image, the rotated clean image,
a degraded copy of the rotated image (4x area downsampling, bilinear
upsampling back, optional Gaussian noise), the Otsu mask of the degraded
image and the character count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .font import GLYPH_COLS, GLYPH_ROWS, digit_glyphs

ANGLES = (-30, -15, 15, 30)
DEGRADE_FACTOR = 4
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class PlateSpec:
    """What to draw on a plate and how.

    ``scale`` multiplies the 5x7 glyph grid; ``spacing`` is the gap between
    characters in pixels (defaults to ``scale``). ``jitter`` bounds the
    seeded random shift of the text block.
    """

    digits: str
    scale: int = 2
    margin: int = 2
    spacing: int | None = None
    background: float = 0.9
    foreground: float = 0.1
    logo: bool = False
    jitter: int = 2

    def __post_init__(self):
        if not (4 <= len(self.digits) <= 8) or not self.digits.isdigit():
            raise ValueError(f"plate digits must be 4-8 characters of 0-9, got {self.digits!r}")
        if self.scale < 1 or self.margin < 0 or self.jitter < 0:
            raise ValueError("scale must be >= 1, margin and jitter >= 0")

    @property
    def gap(self) -> int:
        return self.scale if self.spacing is None else self.spacing

    @property
    def glyph_size(self) -> tuple[int, int]:
        return GLYPH_ROWS * self.scale, GLYPH_COLS * self.scale

    def content_width(self) -> int:
        gh, gw = self.glyph_size
        n = len(self.digits)
        width = n * gw + (n - 1) * self.gap
        if self.logo:
            width += 3 * self.scale + self.gap
        return width


@dataclass
class Plate:
    image: np.ndarray  # (3, S, S) float64 in [0, 1]
    boxes: list[tuple[int, int, int, int]]  # per character (y0, x0, y1, x1), exclusive ends
    ink_fraction: float


def render_plate(spec: PlateSpec, size: int, seed: int) -> Plate:
    """Draw ``spec`` centred on a ``size`` x ``size`` plate.

    The seed only chooses the text-block offset within ``spec.jitter``.
    """
    if size < 32:
        raise ValueError(f"plate size must be >= 32, got {size}")
    gh, gw = spec.glyph_size
    width = spec.content_width()
    room_x = size - 2 * spec.margin - width
    room_y = size - 2 * spec.margin - gh
    if room_x < 0 or room_y < 0:
        raise ValueError(f"plate {spec.digits!r} at scale {spec.scale} does not fit in {size}x{size}")

    rng = np.random.default_rng(seed)
    jx = int(rng.integers(-spec.jitter, spec.jitter + 1)) if spec.jitter else 0
    jy = int(rng.integers(-spec.jitter, spec.jitter + 1)) if spec.jitter else 0
    x = spec.margin + room_x // 2 + int(np.clip(jx, -(room_x // 2), room_x - room_x // 2))
    y0 = spec.margin + room_y // 2 + int(np.clip(jy, -(room_y // 2), room_y - room_y // 2))

    ink = np.zeros((size, size), dtype=bool)
    if spec.logo:
        ink[y0 : y0 + gh, x : x + 3 * spec.scale] = True
        x += 3 * spec.scale + spec.gap
    glyphs = digit_glyphs(spec.scale)
    boxes = []
    for ch in spec.digits:
        ink[y0 : y0 + gh, x : x + gw] |= glyphs[ch].astype(bool)
        boxes.append((y0, x, y0 + gh, x + gw))
        x += gw + spec.gap

    plane = np.where(ink, spec.foreground, spec.background)
    image = np.repeat(plane[None], 3, axis=0)
    return Plate(image, boxes, float(ink.mean()))


def rotate(image: np.ndarray, angle_deg: float, fill: float) -> np.ndarray:
    """Rotate about the image centre, counter-clockwise as displayed, with bilinear sampling.

    Works on (H, W) or (C, H, W) arrays; source positions outside the image
    blend towards ``fill``.
    """
    img = np.asarray(image, dtype=np.float64)
    if angle_deg % 360 == 0:
        return img.copy()
    planar = img.ndim == 2
    if planar:
        img = img[None]
    C, H, W = img.shape
    theta = math.radians(angle_deg)
    # snap so right-angle rotations are exact permutations
    c, s = round(math.cos(theta), 12), round(math.sin(theta), 12)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    src_x = cx + c * dx - s * dy + 1.0  # +1: coordinates in the fill-padded image
    src_y = cy + s * dx + c * dy + 1.0

    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), constant_values=fill)
    valid = (src_x >= 0) & (src_x <= W + 1) & (src_y >= 0) & (src_y <= H + 1)
    x0 = np.clip(np.floor(src_x), 0, W).astype(int)
    y0 = np.clip(np.floor(src_y), 0, H).astype(int)
    fx = np.clip(src_x - x0, 0.0, 1.0)
    fy = np.clip(src_y - y0, 0.0, 1.0)
    top = padded[:, y0, x0] + fx * (padded[:, y0, x0 + 1] - padded[:, y0, x0])
    bot = padded[:, y0 + 1, x0] + fx * (padded[:, y0 + 1, x0 + 1] - padded[:, y0 + 1, x0])
    out = top + fy * (bot - top)
    out = np.where(valid[None], out, fill)
    return out[0] if planar else out


def area_downsample(image: np.ndarray, factor: int = DEGRADE_FACTOR) -> np.ndarray:
    """Mean over ``factor`` x ``factor`` blocks; ``factor`` must be a power of two.

    Pairwise halving keeps constant blocks exactly constant.
    """
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[-2:]
    if H % factor or W % factor:
        raise ValueError(f"spatial dims {H}x{W} not divisible by {factor}")
    while factor > 1:
        img = (img[..., 0::2, :] + img[..., 1::2, :]) / 2.0
        img = (img[..., :, 0::2] + img[..., :, 1::2]) / 2.0
        factor //= 2
    return img


def _bilinear_axis(n_in: int, factor: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = (np.arange(n_in * factor) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def bilinear_upsample(image: np.ndarray, factor: int = DEGRADE_FACTOR) -> np.ndarray:
    """Half-pixel-centred bilinear enlargement with edge clamping."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[-2:]
    lo, hi, f = _bilinear_axis(H, factor)
    img = img[..., lo, :] + f[:, None] * (img[..., hi, :] - img[..., lo, :])
    lo, hi, f = _bilinear_axis(W, factor)
    return img[..., lo] + f * (img[..., hi] - img[..., lo])


def degrade(image: np.ndarray, noise_sigma: float = 0.0, seed: int = 0) -> np.ndarray:
    """4x area downsample, bilinear upsample to the original size, optional clipped Gaussian noise."""
    out = bilinear_upsample(area_downsample(image, DEGRADE_FACTOR), DEGRADE_FACTOR)
    if noise_sigma > 0:
        out = np.clip(out + np.random.default_rng(seed).normal(0.0, noise_sigma, out.shape), 0.0, 1.0)
    return out


def to_gray_levels(image: np.ndarray) -> np.ndarray:
    """8-bit gray levels (0..255) from an RGB (3,H,W) or gray (H,W) image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    gray = np.tensordot(LUMA, img, axes=(0, 0)) if img.ndim == 3 else img
    return np.clip(np.round(gray * 255.0), 0, 255).astype(np.int64)


def otsu_threshold(hist: Sequence[int]) -> int:
    """Threshold t maximising between-class variance of {<= t} vs {> t}.

    Exact integer arithmetic; the first maximiser wins. A histogram with a
    single occupied level returns 255 (everything in the lower class).
    """
    h = [int(v) for v in hist]
    if len(h) != 256:
        raise ValueError("histogram must have 256 bins")
    n = sum(h)
    total_sum = sum(i * v for i, v in enumerate(h))
    if sum(1 for v in h if v) <= 1:
        return 255
    best_t, best_num, best_den = 0, -1, 1
    n0 = s0 = 0
    for t in range(256):
        n0 += h[t]
        s0 += t * h[t]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            num, den = 0, 1
        else:
            # sigma_b^2 * n^2 = (n * s0 - n0 * S)^2 / (n0 * n1)
            num, den = (n * s0 - n0 * total_sum) ** 2, n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def otsu_binarize(image: np.ndarray) -> np.ndarray:
    """{0,1} float mask, 1 where the 8-bit gray level exceeds the Otsu threshold."""
    levels = to_gray_levels(image)
    t = otsu_threshold(np.bincount(levels.ravel(), minlength=256))
    return (levels > t).astype(np.float64)


@dataclass
class TrainingSample:
    i_lq: np.ndarray  # (3, S, S)
    i_hq: np.ndarray  # (3, S, S) rotated clean image
    i_hq_0: np.ndarray  # (3, S, S) unrotated clean image
    i_seg: np.ndarray  # (1, S, S) in {0, 1}
    count: int
    angle: int
    digits: str = ""
    sample_id: str = field(default="", compare=False)


def generate_sample(
    spec: PlateSpec, angle: int, size: int, seed: int, noise_sigma: float = 0.0, plate: Plate | None = None
) -> TrainingSample:
    if angle not in ANGLES:
        raise ValueError(f"angle must be one of {ANGLES}, got {angle}")
    if size % DEGRADE_FACTOR:
        raise ValueError(f"size {size} not divisible by {DEGRADE_FACTOR}")
    plate = plate or render_plate(spec, size, seed)
    hq0 = plate.image
    hq = rotate(hq0, angle, fill=spec.background)
    lq = degrade(hq, noise_sigma, seed=seed * 7 + ANGLES.index(angle))
    seg = otsu_binarize(lq)[None]
    return TrainingSample(lq, hq, hq0, seg, len(spec.digits), angle, spec.digits)


def plate_samples(spec: PlateSpec, size: int, seed: int, noise_sigma: float = 0.0) -> list[TrainingSample]:
    """The four angle variants of one plate, sharing a single render."""
    plate = render_plate(spec, size, seed)
    return [generate_sample(spec, a, size, seed, noise_sigma, plate) for a in ANGLES]


def default_scale(size: int) -> int:
    return max(1, size // 32)


def random_digit_strings(rng: np.random.Generator, n: int, min_digits: int, max_digits: int) -> list[str]:
    """``n`` distinct random digit strings with lengths in [min_digits, max_digits]."""
    seen: set[str] = set()
    out = []
    capacity = sum(10**k for k in range(min_digits, max_digits + 1))
    if n > capacity:
        raise ValueError(f"cannot draw {n} distinct strings of length {min_digits}-{max_digits}")
    while len(out) < n:
        k = int(rng.integers(min_digits, max_digits + 1))
        s = "".join(str(d) for d in rng.integers(0, 10, size=k))
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out
