from .dataset import Manifest, ManifestRecord, make_dataset, read_manifest
from .font import digit_glyphs
from .synthesis import (
    ANGLES,
    Plate,
    PlateSpec,
    TrainingSample,
    area_downsample,
    bilinear_upsample,
    degrade,
    generate_sample,
    otsu_binarize,
    otsu_threshold,
    plate_samples,
    render_plate,
    rotate,
)

__all__ = [
    "ANGLES",
    "Manifest",
    "ManifestRecord",
    "Plate",
    "PlateSpec",
    "TrainingSample",
    "area_downsample",
    "bilinear_upsample",
    "degrade",
    "digit_glyphs",
    "generate_sample",
    "make_dataset",
    "otsu_binarize",
    "otsu_threshold",
    "plate_samples",
    "read_manifest",
    "render_plate",
    "rotate",
]
