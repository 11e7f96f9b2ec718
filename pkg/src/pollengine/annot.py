"""Plain-text annotation sidecars and a cached per-grain dataset view.

One sidecar per image, same stem with a ``.pollen.txt`` suffix, human-diffable.
Floats are written with Python's shortest round-trip repr so that
write -> read -> write reproduces the file byte for byte.
"""
from __future__ import annotations

import re
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    BoundsError,
    GeometryError,
    InputError,
    ParseError,
    StorageError,
    VersionError,
)
from .detect import Contour, DetectParams, GrainDetection
from .raster import Raster, load_image

FORMAT_VERSION = "v1"
_VERSION_LINE = f"# pollen-annotations {FORMAT_VERSION}"


def annotation_path_for(image_path) -> Path:
    """Sidecar path: image path with its extension replaced by .pollen.txt."""
    p = Path(image_path)
    return p.with_name(p.stem + ".pollen.txt")


@dataclass(frozen=True)
class AnnotationFile:
    image_name: str
    generated_at: str
    detector_tag: str
    params: DetectParams
    grains: list[GrainDetection] = field(default_factory=list)

    def __post_init__(self):
        for name, value in (("image_name", self.image_name), ("generated_at", self.generated_at)):
            if not value or any(ch in value for ch in "\r\n"):
                raise InputError(f"{name} must be a non-empty single-line string")
        if not re.fullmatch(r"\S+", self.detector_tag):
            raise InputError(f"detector_tag must be one whitespace-free token, got {self.detector_tag!r}")
        ids = [g.id for g in self.grains]
        if len(ids) != len(set(ids)):
            raise InputError(f"grain ids must be unique, got {sorted(ids)}")
        for g in self.grains:
            if g.contour.points.min() < 0:
                raise GeometryError(f"grain {g.id} has negative contour coordinates")


def _fmt(x: float) -> str:
    return str(float(x))


def render_annotations(file: AnnotationFile) -> str:
    p = file.params
    lines = [
        _VERSION_LINE,
        f"# image: {file.image_name}",
        f"# generated: {file.generated_at}",
        f"# detector: {file.detector_tag} k={p.k:.2f} area={p.min_area:g}..{p.max_area:g} circ>={p.min_circularity:.2f}",
        f"# count: {len(file.grains)}",
    ]
    for g in file.grains:
        x, y, w, h = g.bbox
        lines.append(
            f"grain {g.id} bbox {x} {y} {w} {h} saliency {_fmt(g.saliency)} "
            f"area {_fmt(g.area)} perimeter {_fmt(g.perimeter)} circularity {_fmt(g.circularity)}"
        )
        pts = " ".join(f"{px},{py}" for px, py in g.contour.points)
        lines.append(f"contour {g.id} {pts}")
    return "\n".join(lines) + "\n"


def write_annotations(file: AnnotationFile, path) -> None:
    try:
        Path(path).write_text(render_annotations(file), encoding="utf-8", newline="\n")
    except OSError as exc:
        raise StorageError(f"cannot write annotations to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# parsing

_HEADER_RE = {
    "image": re.compile(r"# image: (?P<val>.+)"),
    "generated": re.compile(r"# generated: (?P<val>.+)"),
    "detector": re.compile(
        r"# detector: (?P<tag>\S+) k=(?P<k>\S+) area=(?P<amin>[^.\s]+(?:\.\d+)?)\.\.(?P<amax>\S+) circ>=(?P<circ>\S+)"
    ),
    "count": re.compile(r"# count: (?P<val>\d+)"),
}


class _Cursor:
    def __init__(self, lines: list[str]):
        self.lines = lines
        self.idx = 0

    @property
    def lineno(self) -> int:
        return self.idx + 1

    def next_line(self, what: str) -> str:
        if self.idx >= len(self.lines):
            raise ParseError(f"unexpected end of file, expected {what}", line=self.lineno)
        line = self.lines[self.idx]
        self.idx += 1
        return line


def _parse_float(token: str, what: str, lineno: int, col: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{what} is not a number: {token!r}", line=lineno, column=col) from None
    if value != value or value in (float("inf"), float("-inf")):
        raise ParseError(f"{what} must be finite, got {token!r}", line=lineno, column=col)
    return value


def _parse_int(token: str, what: str, lineno: int, col: int) -> int:
    if not re.fullmatch(r"-?\d+", token):
        raise ParseError(f"{what} is not an integer: {token!r}", line=lineno, column=col)
    return int(token)


def _tokens_with_columns(line: str) -> list[tuple[str, int]]:
    return [(m.group(0), m.start() + 1) for m in re.finditer(r"\S+", line)]


def parse_annotations(text: str, source: str = "<string>") -> AnnotationFile:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    cur = _Cursor(lines)

    version = cur.next_line("version header")
    if version != _VERSION_LINE:
        m = re.fullmatch(r"# pollen-annotations (\S+)", version)
        if m:
            raise VersionError(f"{source}: unsupported annotation version {m.group(1)!r} (have {FORMAT_VERSION})")
        raise ParseError(f"not an annotation file, bad first line {version!r}", line=1)

    fields = {}
    for key in ("image", "generated", "detector", "count"):
        line = cur.next_line(f"'# {key}:' header")
        m = _HEADER_RE[key].fullmatch(line)
        if not m:
            raise ParseError(f"malformed '# {key}:' header: {line!r}", line=cur.lineno - 1)
        fields[key] = m.groupdict()

    lineno = cur.lineno - 2
    det = fields["detector"]
    params = DetectParams(
        k=_parse_float(det["k"], "k", lineno, 1),
        min_area=_parse_float(det["amin"], "min area", lineno, 1),
        max_area=_parse_float(det["amax"], "max area", lineno, 1),
        min_circularity=_parse_float(det["circ"], "min circularity", lineno, 1),
    )
    declared = int(fields["count"]["val"])

    grains: list[GrainDetection] = []
    while cur.idx < len(cur.lines):
        lineno = cur.lineno
        line = cur.next_line("grain line")
        if line == "":
            continue
        toks = _tokens_with_columns(line)
        if toks[0][0] != "grain":
            raise ParseError(f"expected a 'grain' line, got {toks[0][0]!r}", line=lineno, column=1)
        keywords = ((2, "bbox"), (7, "saliency"), (9, "area"), (11, "perimeter"), (13, "circularity"))
        if len(toks) != 15 or any(toks[i][0] != kw for i, kw in keywords):
            expected = "grain ID bbox X Y W H saliency S area A perimeter P circularity C"
            raise ParseError(f"grain line does not match '{expected}'", line=lineno, column=1)
        gid = _parse_int(toks[1][0], "grain id", lineno, toks[1][1])
        bbox = tuple(_parse_int(t, "bbox field", lineno, c) for t, c in toks[3:7])
        saliency = _parse_float(toks[8][0], "saliency", lineno, toks[8][1])
        area = _parse_float(toks[10][0], "area", lineno, toks[10][1])
        perimeter = _parse_float(toks[12][0], "perimeter", lineno, toks[12][1])
        circ = _parse_float(toks[14][0], "circularity", lineno, toks[14][1])

        expect = 4.0 * 3.141592653589793 * area / (perimeter * perimeter) if area > 0 and perimeter > 0 else 0.0
        if abs(circ - expect) > 1e-6:
            raise ParseError(
                f"grain {gid}: circularity {circ} inconsistent with area/perimeter (recomputed {expect:.9g})",
                line=lineno,
                column=toks[14][1],
            )

        clineno = cur.lineno
        cline = cur.next_line(f"contour line for grain {gid}")
        ctoks = _tokens_with_columns(cline)
        if not ctoks or ctoks[0][0] != "contour":
            raise ParseError(f"expected 'contour' line for grain {gid}", line=clineno, column=1)
        if len(ctoks) < 2 or _parse_int(ctoks[1][0], "contour id", clineno, ctoks[1][1]) != gid:
            raise ParseError(f"contour id does not match grain id {gid}", line=clineno, column=ctoks[1][1] if len(ctoks) > 1 else 1)
        points = []
        for tok, col in ctoks[2:]:
            m = re.fullmatch(r"(-?\d+),(-?\d+)", tok)
            if not m:
                raise ParseError(f"bad contour point {tok!r}, expected X,Y", line=clineno, column=col)
            points.append((int(m.group(1)), int(m.group(2))))
        if len(points) < 3:
            raise ParseError(f"contour for grain {gid} needs at least 3 points", line=clineno, column=1)

        try:
            grain = GrainDetection(
                id=gid,
                bbox=bbox,
                contour=Contour(points),
                saliency=saliency,
                area=area,
                perimeter=perimeter,
                # canonical value: trust stored digits when they are exact
                circularity=circ if abs(circ - expect) <= 1e-9 else expect,
            )
        except (InputError, GeometryError) as exc:
            raise ParseError(f"grain {gid}: {exc}", line=lineno) from exc
        grains.append(grain)

    if len(grains) != declared:
        raise ParseError(f"count header declares {declared} grains, file has {len(grains)}", line=5)

    try:
        return AnnotationFile(
            image_name=fields["image"]["val"],
            generated_at=fields["generated"]["val"],
            detector_tag=det["tag"],
            params=params,
            grains=grains,
        )
    except (InputError, GeometryError) as exc:
        raise ParseError(str(exc), line=1) from exc


def read_annotations(path) -> AnnotationFile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read annotations {path}: {exc}") from exc
    return parse_annotations(text, source=str(path))


# ---------------------------------------------------------------------------
# dataset

class GrainDataset:
    """Flat index over grains in many annotation files with an LRU image cache.

    Annotation files are parsed once up front; source images are decoded
    lazily and kept in a least-recently-used cache so sweeps over up to
    `cache_capacity` distinct images decode each exactly once. Safe to hit
    from multiple threads.
    """

    def __init__(self, annotation_paths, cache_capacity: int = 64):
        if cache_capacity < 1:
            raise InputError(f"cache capacity must be >= 1, got {cache_capacity}")
        self.cache_capacity = cache_capacity
        self.entries: list[tuple[Path, int]] = []
        self._grains: dict[tuple[Path, int], GrainDetection] = {}
        self._image_paths: dict[Path, Path] = {}
        for raw in annotation_paths:
            path = Path(raw)
            ann = read_annotations(path)
            self._image_paths[path] = path.parent / ann.image_name
            for g in ann.grains:
                self.entries.append((path, g.id))
                self._grains[(path, g.id)] = g
        self._cache: OrderedDict[Path, Raster] = OrderedDict()
        self._lock = threading.Lock()
        self.decode_counts: dict[Path, int] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def _load(self, image_path: Path) -> Raster:
        # decode under the lock: serializes I/O but guarantees exactly one
        # decode per resident image even under concurrent access
        with self._lock:
            if image_path in self._cache:
                self._cache.move_to_end(image_path)
                return self._cache[image_path]
            if not image_path.is_file():
                raise StorageError(f"image file not found: {image_path}")
            img = load_image(image_path)
            self.decode_counts[image_path] = self.decode_counts.get(image_path, 0) + 1
            self._cache[image_path] = img
            if len(self._cache) > self.cache_capacity:
                self._cache.popitem(last=False)
            return img

    def get(self, index: int) -> tuple[Raster, GrainDetection]:
        if not (0 <= index < len(self.entries)):
            raise BoundsError(f"dataset index {index} out of range [0, {len(self.entries)})")
        ann_path, grain_id = self.entries[index]
        img = self._load(self._image_paths[ann_path])
        return img, self._grains[(ann_path, grain_id)]


def dataset_get(ds: GrainDataset, index: int) -> tuple[Raster, GrainDetection]:
    return ds.get(index)
