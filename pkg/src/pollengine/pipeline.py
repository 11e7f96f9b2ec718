"""Full-image run: detect grains, embed each crop, classify, aggregate.

Produces a per-image report (counts, percentages, sizes in micrometers),
an overlay raster with color-coded boxes, and optional per-grain
heatmaps when the embedder can expose attention captures.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import xai
from .detect import DetectParams, detect_grains
from .embed import Embedding
from .errors import DimensionError, InputError, ParameterError, PollenError
from .metrics import CentroidSet, classify
from .prep import prepare_grain
from .raster import Raster, SaliencyMap


# ---------------------------------------------------------------------------
# micron calibration

@dataclass(frozen=True)
class CalibrationParams:
    """Object-plane scale from sensor pixel pitch and objective power."""

    sensor_pixel_um: float = 3.774
    magnification: float = 60.0

    def __post_init__(self):
        if self.magnification <= 0:
            raise ParameterError(f"magnification must be positive, got {self.magnification}")
        if self.sensor_pixel_um <= 0:
            raise ParameterError(f"sensor pixel size must be positive, got {self.sensor_pixel_um}")

    @property
    def um_per_px(self) -> float:
        return self.sensor_pixel_um / self.magnification


# the two scales floating around our acquisition notes disagree; keep both
# available by name instead of blessing either in code
CALIBRATION_PRESETS = {
    "fine": CalibrationParams(sensor_pixel_um=3.774, magnification=60.0),  # 0.0629
    "coarse": CalibrationParams(sensor_pixel_um=0.15, magnification=1.0),  # 0.15
}


def equivalent_diameter(area_px2: float, cal: CalibrationParams) -> float:
    """Diameter of the circle with the same area, in micrometers."""
    if area_px2 < 0:
        raise InputError(f"area cannot be negative, got {area_px2}")
    return 2.0 * math.sqrt(area_px2 / math.pi) * cal.um_per_px


# ---------------------------------------------------------------------------
# report

@dataclass(frozen=True)
class GrainRecord:
    id: int
    class_name: object
    distance: float | None
    confidence: float | None
    bbox: tuple[int, int, int, int]
    equivalent_diameter_um: float

    @property
    def classified(self) -> bool:
        return self.class_name is not None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "class": self.class_name,
            "distance": self.distance,
            "confidence": self.confidence,
            "bbox": list(self.bbox),
            "equivalent_diameter_um": self.equivalent_diameter_um,
        }


@dataclass(frozen=True)
class PalynologyReport:
    image_name: str
    total_grains: int
    counts: dict
    percentages: dict
    grains: tuple
    size_stats: dict
    calibration: CalibrationParams
    unclassified: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grains", tuple(self.grains))
        if sum(self.counts.values()) + self.unclassified != self.total_grains:
            raise InputError("class counts plus unclassified must sum to total grains")
        if self.counts and abs(sum(self.percentages.values()) - 100.0) > 0.01:
            raise InputError("percentages must sum to 100")
        for rec in self.grains:
            if rec.classified and rec.class_name not in self.counts:
                raise InputError(f"grain {rec.id} class {rec.class_name!r} missing from counts")

    def to_dict(self) -> dict:
        return {
            "image": self.image_name,
            "total_grains": self.total_grains,
            "classified": self.total_grains - self.unclassified,
            "unclassified": self.unclassified,
            "counts": dict(self.counts),
            "percentages": dict(self.percentages),
            "grains": [rec.to_dict() for rec in self.grains],
            "size_stats": {
                str(name): {"mean_um": m, "std_um": s}
                for name, (m, s) in self.size_stats.items()
            },
            "calibration": {
                "sensor_pixel_um": self.calibration.sensor_pixel_um,
                "magnification": self.calibration.magnification,
                "um_per_px": self.calibration.um_per_px,
            },
        }


# ---------------------------------------------------------------------------
# overlay drawing

_PALETTE = (
    (230, 60, 60),
    (60, 160, 230),
    (80, 200, 100),
    (240, 180, 40),
    (170, 90, 220),
    (250, 120, 40),
    (60, 210, 200),
    (230, 100, 180),
    (140, 190, 60),
    (100, 110, 230),
    (200, 150, 110),
    (120, 120, 120),
)
_UNCLASSIFIED_COLOR = (235, 235, 235)


def class_color(class_name) -> tuple[int, int, int]:
    """Stable palette pick; the same name always maps to the same color."""
    return _PALETTE[zlib.crc32(str(class_name).encode("utf-8")) % len(_PALETTE)]


def draw_overlay(image: Raster, records) -> Raster:
    """Color-coded labeled boxes on a copy of the input image."""
    from PIL import Image, ImageDraw

    if not records:
        return Raster(image.data.copy())
    arr = image.to_u8()
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    canvas = Image.fromarray(arr)
    draw = ImageDraw.Draw(canvas)
    for rec in records:
        x, y, w, h = rec.bbox
        color = class_color(rec.class_name) if rec.classified else _UNCLASSIFIED_COLOR
        draw.rectangle([x, y, x + w - 1, y + h - 1], outline=color, width=2)
        label = f"{rec.id}:{rec.class_name}" if rec.classified else f"{rec.id}:?"
        draw.text((x + 2, max(0, y - 12)), label, fill=color)
    return Raster.from_u8(np.asarray(canvas))


# ---------------------------------------------------------------------------
# the run itself

def _grain_stage(image, det, embedder, cs, cal, tau):
    """Prepare, embed and classify one grain; None prediction on failure."""
    crop = prepare_grain(image, det, source_grain=det.id)
    try:
        pred = classify(embedder(crop), cs, tau=tau)
    except PollenError:
        pred = None
    diameter = equivalent_diameter(det.area, cal)
    if pred is None:
        rec = GrainRecord(det.id, None, None, None, det.bbox, diameter)
    else:
        rec = GrainRecord(det.id, pred.class_name, pred.distance, pred.confidence, det.bbox, diameter)
    return rec, crop


def run_pipeline(
    image: Raster,
    saliency: SaliencyMap,
    params: DetectParams,
    embedder,
    cs: CentroidSet,
    cal: CalibrationParams = CalibrationParams(),
    emit_heatmaps: bool = False,
    image_name: str = "image",
    out_dir=None,
    tau: float = 0.1,
    threads: int = 1,
) -> tuple[PalynologyReport, Raster]:
    """Detect, classify and aggregate every grain in one image.

    A grain whose embedder call fails is kept in the report with a null
    class and tallied as unclassified; percentages cover classified
    grains only. Heatmaps are written to out_dir only when requested and
    the embedder exposes similarity_grad.
    """
    if (image.height, image.width) != (saliency.height, saliency.width):
        raise DimensionError(
            f"image is {image.height}x{image.width} but saliency is "
            f"{saliency.height}x{saliency.width}"
        )
    if threads < 1:
        raise ParameterError(f"threads must be >= 1, got {threads}")
    detections = detect_grains(saliency, params)

    if threads == 1 or len(detections) < 2:
        staged = [_grain_stage(image, det, embedder, cs, cal, tau) for det in detections]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            staged = list(
                pool.map(lambda det: _grain_stage(image, det, embedder, cs, cal, tau), detections)
            )
    records = [rec for rec, _ in staged]

    can_capture = hasattr(embedder, "similarity_grad") and hasattr(embedder, "weights")
    if emit_heatmaps and out_dir is not None and can_capture:
        for (rec, crop), det in zip(staged, detections):
            if not rec.classified:
                continue
            centroid = Embedding(cs.centroid(rec.class_name))
            cap = embedder.similarity_grad(crop, centroid)
            hm = xai.weighted_heatmap(cap, embedder.weights.cfg, grain_id=det.id)
            xai.write_heatmap_files(hm, crop, image_name, Path(out_dir))

    classified = [rec for rec in records if rec.classified]
    counts: dict = {}
    for rec in classified:
        counts[rec.class_name] = counts.get(rec.class_name, 0) + 1
    percentages = {
        name: 100.0 * n / len(classified) for name, n in counts.items()
    }
    size_stats = {}
    for name in counts:
        sizes = np.array([rec.equivalent_diameter_um for rec in classified if rec.class_name == name])
        size_stats[name] = (float(sizes.mean()), float(sizes.std()))

    report = PalynologyReport(
        image_name=image_name,
        total_grains=len(records),
        counts=counts,
        percentages=percentages,
        grains=tuple(records),
        size_stats=size_stats,
        calibration=cal,
        unclassified=len(records) - len(classified),
    )
    return report, draw_overlay(image, records)


# ---------------------------------------------------------------------------
# synthetic fixtures

def synthetic_scene(
    width: int,
    height: int,
    disks,
    background: float = 0.82,
    saliency_fg: float = 0.9,
    saliency_bg: float = 0.05,
) -> tuple[Raster, SaliencyMap]:
    """Flat-shaded disks on a bright field, with a matching saliency map.

    disks is a list of (cx, cy, r, shade) tuples; shade is the disk's
    gray level in [0, 1].
    """
    img = np.full((height, width, 3), background)
    sal = np.full((height, width), saliency_bg)
    ys, xs = np.mgrid[0:height, 0:width]
    for cx, cy, r, shade in disks:
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        img[inside] = shade
        sal[inside] = saliency_fg
    return Raster(img), SaliencyMap(sal)
