"""On-disk synthetic datasets: image files plus a tab-separated manifest.

Manifest layout (one file per split, UTF-8, ``\\n`` line ends)::

    # snider-manifest v1
    # id<TAB>angle<TAB>count<TAB>digits<TAB>lq<TAB>hq<TAB>hq0<TAB>seg
    p00000_m30<TAB>-30<TAB>4<TAB>0412<TAB>images/p00000_m30_lq.ppm<TAB>...

Paths are relative to the manifest's directory. RGB images are P6 PPM,
masks are P5 PGM holding 0/255. The unrotated clean image is written once
per plate and shared by its four samples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .synthesis import ANGLES, PlateSpec, TrainingSample, default_scale, plate_samples, random_digit_strings

log = logging.getLogger(__name__)

MANIFEST_MAGIC = "# snider-manifest v1"
COLUMNS = ("id", "angle", "count", "digits", "lq", "hq", "hq0", "seg")


@dataclass(frozen=True)
class ManifestRecord:
    sample_id: str
    angle: int
    count: int
    digits: str
    lq: str
    hq: str
    hq0: str
    seg: str

    def to_line(self) -> str:
        fields = (self.sample_id, str(self.angle), str(self.count), self.digits, self.lq, self.hq, self.hq0, self.seg)
        return "\t".join(fields)

    @classmethod
    def from_line(cls, line: str) -> "ManifestRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(COLUMNS):
            raise ValueError(f"manifest line has {len(parts)} fields, expected {len(COLUMNS)}: {line!r}")
        sid, angle, count, digits, lq, hq, hq0, seg = parts
        return cls(sid, int(angle), int(count), digits, lq, hq, hq0, seg)


@dataclass
class Manifest:
    root: Path
    records: list[ManifestRecord]

    def __len__(self) -> int:
        return len(self.records)

    def load(self, index: int) -> TrainingSample:
        rec = self.records[index]
        sample = TrainingSample(
            i_lq=imageio.read_ppm(self.root / rec.lq),
            i_hq=imageio.read_ppm(self.root / rec.hq),
            i_hq_0=imageio.read_ppm(self.root / rec.hq0),
            i_seg=(imageio.read_pgm_uint8(self.root / rec.seg) > 127).astype(np.float32)[None],
            count=rec.count,
            angle=rec.angle,
            digits=rec.digits,
            sample_id=rec.sample_id,
        )
        return sample

    def load_all(self) -> list[TrainingSample]:
        return [self.load(i) for i in range(len(self))]

    def write(self, path: Path) -> None:
        lines = [MANIFEST_MAGIC, "# " + "\t".join(COLUMNS)] + [r.to_line() for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_MAGIC:
        raise ValueError(f"{path}: not a snider manifest (missing {MANIFEST_MAGIC!r} header)")
    records = [ManifestRecord.from_line(ln) for ln in lines[1:] if ln.strip() and not ln.startswith("#")]
    return Manifest(path.parent, records)


def _angle_tag(angle: int) -> str:
    return f"{'m' if angle < 0 else 'p'}{abs(angle):02d}"


def make_dataset(
    out_dir,
    n_plates: int,
    size: int,
    seed: int,
    split: float = 0.8,
    noise_sigma: float = 0.05,
    min_digits: int = 4,
    max_digits: int = 5,
    scale: int | None = None,
) -> tuple[Manifest, Manifest]:
    """Render ``n_plates`` plates, expand each to its four angle samples and split by plate.

    The first ``round(split * n_plates)`` plates go to ``train.tsv``, the
    rest to ``test.tsv``. Digit strings are unique across the whole set.
    """
    if not 0 < split < 1:
        raise ValueError(f"split must lie strictly between 0 and 1, got {split}")
    if n_plates < 1:
        raise ValueError("n_plates must be positive")
    scale = scale or default_scale(size)
    widest = PlateSpec("0" * max_digits, scale=scale)
    if widest.content_width() + 2 * widest.margin > size or widest.glyph_size[0] + 2 * widest.margin > size:
        raise ValueError(f"{max_digits}-digit plates at scale {scale} do not fit in {size}x{size}")
    rng = np.random.default_rng(seed)
    strings = random_digit_strings(rng, n_plates, min_digits, max_digits)
    plate_seeds = rng.integers(0, 2**31 - 1, size=n_plates)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    n_train = int(round(split * n_plates))
    splits: tuple[list[ManifestRecord], list[ManifestRecord]] = ([], [])
    for p, (digits, pseed) in enumerate(zip(strings, plate_seeds)):
        spec = PlateSpec(digits, scale=scale)
        samples = plate_samples(spec, size, int(pseed), noise_sigma)
        hq0_rel = f"images/p{p:05d}_hq0.ppm"
        imageio.write_ppm(out / hq0_rel, samples[0].i_hq_0)
        for angle, s in zip(ANGLES, samples):
            sid = f"p{p:05d}_{_angle_tag(angle)}"
            rel = {k: f"images/{sid}_{k}.{ext}" for k, ext in (("lq", "ppm"), ("hq", "ppm"), ("seg", "pgm"))}
            imageio.write_ppm(out / rel["lq"], s.i_lq)
            imageio.write_ppm(out / rel["hq"], s.i_hq)
            imageio.write_pgm(out / rel["seg"], s.i_seg)
            rec = ManifestRecord(sid, angle, s.count, digits, rel["lq"], rel["hq"], hq0_rel, rel["seg"])
            splits[0 if p < n_train else 1].append(rec)

    train, test = Manifest(out, splits[0]), Manifest(out, splits[1])
    train.write(out / "train.tsv")
    test.write(out / "test.tsv")
    log.info("wrote %d train / %d test samples to %s", len(train), len(test), out)
    return train, test
