"""Saliency-map post-processing: threshold, clean up, trace, and filter grains.

The chain is deterministic and purely geometric. A probability map comes in,
a list of measured grain detections comes out, each with its outer contour,
shoelace area, closed-polyline perimeter, and compactness score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, InputError, ParameterError
from .raster import BinaryMask, SaliencyMap


@dataclass(frozen=True)
class DetectParams:
    k: float = 0.30
    t_min: float = 0.15
    t_max: float = 0.50
    min_area: float = 1000.0
    max_area: float = 120000.0
    min_circularity: float = 0.3

    def __post_init__(self):
        if not (0.0 <= self.t_min <= self.t_max <= 1.0):
            raise ParameterError(f"need 0 <= t_min <= t_max <= 1, got [{self.t_min}, {self.t_max}]")
        if not math.isfinite(self.k):
            raise ParameterError("k must be finite")
        if not (0.0 < self.min_area <= self.max_area):
            raise ParameterError(f"need 0 < min_area <= max_area, got [{self.min_area}, {self.max_area}]")
        if not (0.0 <= self.min_circularity <= 1.0):
            raise ParameterError(f"min_circularity must be in [0, 1], got {self.min_circularity}")


@dataclass(frozen=True, eq=False)
class Contour:
    """Closed polygon of (x, y) lattice points tracing a component's outer boundary.

    Stored in the order produced by the boundary walk, normalized so the
    shoelace signed area is non-negative. The closing edge (last to first
    point) is implicit.
    """

    points: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, Contour):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(np.all(self.points == other.points))

    def __hash__(self):
        return hash(self.points.tobytes())

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise GeometryError(f"contour needs at least 3 (x, y) points, got shape {pts.shape}")
        pts = np.ascontiguousarray(pts)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def bbox(self) -> tuple[int, int, int, int]:
        """Tight (x, y, w, h) around the contour points."""
        xs = self.points[:, 0]
        ys = self.points[:, 1]
        x0, y0 = int(xs.min()), int(ys.min())
        return (x0, y0, int(xs.max()) - x0 + 1, int(ys.max()) - y0 + 1)


@dataclass(frozen=True)
class GrainDetection:
    id: int
    bbox: tuple[int, int, int, int]
    contour: Contour
    saliency: float
    area: float
    perimeter: float
    circularity: float

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))
        if self.id < 0:
            raise InputError(f"grain id must be non-negative, got {self.id}")
        if not (0.0 <= self.saliency <= 1.0):
            raise InputError(f"grain saliency must be in [0, 1], got {self.saliency}")
        if tuple(self.bbox) != self.contour.bbox():
            raise GeometryError(f"bbox {self.bbox} does not tightly enclose contour bbox {self.contour.bbox()}")
        expect = 4.0 * math.pi * self.area / (self.perimeter**2) if self.perimeter > 0 and self.area > 0 else 0.0
        if abs(self.circularity - expect) > 1e-9:
            raise GeometryError(
                f"circularity {self.circularity!r} inconsistent with area/perimeter (expected {expect!r})"
            )


# ---------------------------------------------------------------------------
# thresholding

def adaptive_threshold(sal: SaliencyMap, params: DetectParams) -> float:
    """Threshold at mean + k * std of the map, clamped to [t_min, t_max]."""
    values = sal.values
    if values.size == 0:
        raise InputError("cannot threshold an empty map")
    mu = float(values.mean())
    sigma = float(values.std())
    return float(min(max(mu + params.k * sigma, params.t_min), params.t_max))


def binarize(sal: SaliencyMap, threshold: float) -> BinaryMask:
    """Foreground wherever the map value is at least the threshold."""
    if not (0.0 <= threshold <= 1.0):
        raise ParameterError(f"threshold must be in [0, 1], got {threshold}")
    return BinaryMask(sal.values >= threshold)


# ---------------------------------------------------------------------------
# morphology (3x3 cross structuring element)

def _dilate(bits: np.ndarray) -> np.ndarray:
    p = np.pad(bits, 1, mode="constant", constant_values=False)
    return p[1:-1, 1:-1] | p[:-2, 1:-1] | p[2:, 1:-1] | p[1:-1, :-2] | p[1:-1, 2:]


def _erode(bits: np.ndarray) -> np.ndarray:
    # pixels beyond the border count as foreground, so a full-frame mask is a
    # fixed point of erosion
    p = np.pad(bits, 1, mode="constant", constant_values=True)
    return p[1:-1, 1:-1] & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]


def morph_refine(mask: BinaryMask) -> BinaryMask:
    """Closing then opening with the 3x3 cross element.

    Closing seals single-pixel holes and hairline gaps; opening strips
    isolated speckles and thin protrusions.
    """
    bits = mask.bits
    closed = _erode(_dilate(bits))
    opened = _dilate(_erode(closed))
    return BinaryMask(opened)


# ---------------------------------------------------------------------------
# connected components (run-length union-find)

def label_components(bits: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label foreground components; returns (labels 1..n with 0 background, n).

    Row runs are merged with a union-find, so cost scales with the number of
    runs rather than pixels.
    """
    if connectivity not in (4, 8):
        raise ParameterError(f"connectivity must be 4 or 8, got {connectivity}")
    h, w = bits.shape
    reach = 1 if connectivity == 8 else 0
    parent: list[int] = []

    def find(i: int) -> int:
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    rows: list[list[tuple[int, int, int]]] = []
    prev: list[tuple[int, int, int]] = []
    for y in range(h):
        row = bits[y].astype(np.int8)
        edges = np.diff(np.concatenate(([0], row, [0])))
        starts = np.flatnonzero(edges == 1)
        ends = np.flatnonzero(edges == -1)
        cur: list[tuple[int, int, int]] = []
        for s, e in zip(starts.tolist(), ends.tolist()):
            rid = len(parent)
            parent.append(rid)
            for ps, pe, pid in prev:
                if ps < e + reach and pe > s - reach:
                    union(rid, pid)
            cur.append((s, e, rid))
        rows.append(cur)
        prev = cur

    labels = np.zeros((h, w), dtype=np.int32)
    compact: dict[int, int] = {}
    for y, runs in enumerate(rows):
        for s, e, rid in runs:
            root = find(rid)
            if root not in compact:
                compact[root] = len(compact) + 1
            labels[y, s:e] = compact[root]
    return labels, len(compact)


# ---------------------------------------------------------------------------
# contour tracing

# clockwise sweep on screen (y grows downward), as (dy, dx)
_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
_MOORE_INDEX = {d: i for i, d in enumerate(_MOORE)}


def _trace_boundary(is_fg, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Moore-neighbor walk around one component, entered from the west.

    Stops when the walk is back at the start pixel and about to repeat its
    first move; a trailing revisit of the start point is dropped so the
    polygon stays implicitly closed.
    """
    sy, sx = start
    points = [(sx, sy)]
    cur = start
    back = (0, -1)  # offset of the backtrack cell relative to cur
    first_move = None
    while True:
        base = _MOORE_INDEX[back]
        nxt = None
        for step in range(1, 9):
            dy, dx = _MOORE[(base + step) % 8]
            ny, nx = cur[0] + dy, cur[1] + dx
            if is_fg(ny, nx):
                nxt = (ny, nx)
                prev_dy, prev_dx = _MOORE[(base + step - 1) % 8]
                back = (cur[0] + prev_dy - ny, cur[1] + prev_dx - nx)
                break
        if nxt is None:
            return points  # isolated pixel
        if cur == start:
            if first_move is None:
                first_move = nxt
            elif nxt == first_move:
                break
        cur = nxt
        points.append((cur[1], cur[0]))
        if len(points) > 4 * is_fg.size_bound:
            raise GeometryError("boundary walk failed to terminate")
    if len(points) > 1 and points[-1] == points[0]:
        points.pop()
    return points


class _FgProbe:
    """Bounds-checked foreground test for one labeled component."""

    def __init__(self, labels: np.ndarray, which: int):
        self.labels = labels
        self.which = which
        self.size_bound = labels.size

    def __call__(self, y: int, x: int) -> bool:
        if y < 0 or x < 0 or y >= self.labels.shape[0] or x >= self.labels.shape[1]:
            return False
        return self.labels[y, x] == self.which


def shoelace_area(points: np.ndarray) -> float:
    """Signed polygon area; positive for counter-clockwise order in y-up axes."""
    x = points[:, 0].astype(np.float64)
    y = points[:, 1].astype(np.float64)
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_perimeter(points: np.ndarray) -> float:
    d = np.diff(np.vstack([points, points[:1]]).astype(np.float64), axis=0)
    return float(np.sqrt((d * d).sum(axis=1)).sum())


def extract_contours(mask: BinaryMask) -> list[Contour]:
    """Outer boundary of every 8-connected component, holes ignored.

    Components whose boundary walk yields fewer than 3 points (single pixels
    and pixel pairs) have no polygonal contour and are skipped.
    """
    labels, count = label_components(mask.bits, connectivity=8)
    out = []
    for which in range(1, count + 1):
        ys, xs = np.nonzero(labels == which)
        first = int(np.argmin(ys * labels.shape[1] + xs))
        start = (int(ys[first]), int(xs[first]))
        points = _trace_boundary(_FgProbe(labels, which), start)
        if len(points) < 3:
            continue
        pts = np.asarray(points, dtype=np.int64)
        if shoelace_area(pts) < 0:
            pts = np.vstack([pts[:1], pts[1:][::-1]])
        out.append(Contour(pts))
    return out


def fill_contour(contour: Contour, shape: tuple[int, int]) -> np.ndarray:
    """Boolean mask of the contour plus its enclosed interior, clipped to shape.

    The interior is whatever a 4-connected flood from outside the contour's
    padded bounding box cannot reach; diagonal steps in the boundary cannot
    leak a 4-connected flood.
    """
    x0, y0, w, h = contour.bbox()
    stamp = np.zeros((h + 2, w + 2), dtype=bool)
    stamp[contour.points[:, 1] - y0 + 1, contour.points[:, 0] - x0 + 1] = True
    labels, _ = label_components(~stamp, connectivity=4)
    outside = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    outside = set(outside.tolist()) - {0}
    filled = stamp | ~np.isin(labels, list(outside))
    filled = filled[1:-1, 1:-1]

    out = np.zeros(shape, dtype=bool)
    ys0, xs0 = max(0, y0), max(0, x0)
    ys1, xs1 = min(shape[0], y0 + h), min(shape[1], x0 + w)
    if ys1 > ys0 and xs1 > xs0:
        out[ys0:ys1, xs0:xs1] = filled[ys0 - y0 : ys1 - y0, xs0 - x0 : xs1 - x0]
    return out


# ---------------------------------------------------------------------------
# measurement and the full chain

def measure(contour: Contour) -> tuple[float, float, float]:
    """(area, perimeter, circularity) of a closed contour.

    Area is the absolute shoelace value, perimeter the closed polyline
    length, circularity 4*pi*A/P^2 (zero for degenerate flat polygons).
    """
    area = abs(shoelace_area(contour.points))
    perimeter = polygon_perimeter(contour.points)
    if area == 0.0 or perimeter == 0.0:
        return (area, perimeter, 0.0)
    return (area, perimeter, 4.0 * math.pi * area / (perimeter * perimeter))


def detect_grains(sal: SaliencyMap, params: DetectParams | None = None) -> list[GrainDetection]:
    """Threshold, refine, trace, measure, and filter a saliency map.

    Survivors are ordered by bounding-box origin in raster order and given
    ids 0..n-1.
    """
    params = params or DetectParams()
    threshold = adaptive_threshold(sal, params)
    refined = morph_refine(binarize(sal, threshold))
    kept = []
    for contour in extract_contours(refined):
        area, perimeter, circ = measure(contour)
        if not (params.min_area <= area <= params.max_area):
            continue
        if circ < params.min_circularity:
            continue
        inside = fill_contour(contour, (sal.height, sal.width))
        saliency = float(sal.values[inside].mean()) if inside.any() else 0.0
        kept.append((contour, area, perimeter, circ, saliency))
    kept.sort(key=lambda item: (item[0].bbox()[1], item[0].bbox()[0]))
    return [
        GrainDetection(
            id=i,
            bbox=contour.bbox(),
            contour=contour,
            saliency=saliency,
            area=area,
            perimeter=perimeter,
            circularity=circ,
        )
        for i, (contour, area, perimeter, circ, saliency) in enumerate(kept)
    ]
