"""Portable on-disk formats for slides, annotations and analysis maps.

A slide is a directory::

    meta.txt        width <int> / height <int> / levels <int> / tile <int>
    level_0.ppm     full resolution (binary P6, maxval 255)
    level_1.ppm     ceil(w/2) x ceil(h/2)
    ...

Pyramid level 0 is the finest raster. An annotation file is plain text::

    slide 8192 8192
    region invasive 10.5,20 300,20 300,410.25

Analysis maps are written as P5 (binary mode) or P6 (multiclass mode).
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .classes import TUMOR_CLASSES, TissueClass
from .errors import (
    CorruptRaster,
    DegeneratePolygon,
    DimensionMismatch,
    IoFailure,
    MissingLevel,
    ParseError,
    UnknownClass,
    ValidationError,
)

META_NAME = "meta.txt"
_META_KEYS = ("width", "height", "levels", "tile")


def level_shape(width: int, height: int, level: int) -> tuple[int, int]:
    """(width, height) of pyramid ``level`` under the ceil-halving rule."""
    for _ in range(level):
        width, height = -(-width // 2), -(-height // 2)
    return width, height


@dataclass
class SlideImage:
    """Multi-level RGB raster pyramid.

    ``levels[l]`` is a ``(h, w, 3)`` uint8 array; each level halves the
    previous one (rounding up).
    """

    levels: list[np.ndarray]
    tile: int = 256

    def __post_init__(self) -> None:
        if not self.levels:
            raise DimensionMismatch("slide needs at least one level")
        h0, w0 = self.levels[0].shape[:2]
        for l, raster in enumerate(self.levels):
            if raster.ndim != 3 or raster.shape[2] != 3 or raster.dtype != np.uint8:
                raise DimensionMismatch(f"level {l}: expected (h, w, 3) uint8 raster")
            expect_w, expect_h = level_shape(w0, h0, l)
            if raster.shape[:2] != (expect_h, expect_w):
                raise DimensionMismatch(
                    f"level {l} is {raster.shape[1]}x{raster.shape[0]}, "
                    f"expected {expect_w}x{expect_h}"
                )
        if self.tile < 1:
            raise DimensionMismatch("tile must be positive")

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @property
    def level0_width(self) -> int:
        return self.levels[0].shape[1]

    @property
    def level0_height(self) -> int:
        return self.levels[0].shape[0]

    def level_dimensions(self, level: int) -> tuple[int, int]:
        h, w = self.levels[level].shape[:2]
        return w, h


@dataclass(frozen=True)
class Region:
    label: TissueClass
    vertices: tuple[tuple[float, float], ...]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=np.float64)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        xs = [v[0] for v in self.vertices]
        ys = [v[1] for v in self.vertices]
        return min(xs), min(ys), max(xs), max(ys)


@dataclass(frozen=True)
class AnnotationSet:
    width: float
    height: float
    regions: tuple[Region, ...] = ()

    def __post_init__(self) -> None:
        for i, region in enumerate(self.regions):
            _validate_region(region, self.width, self.height, where=f"region {i}")


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area."""
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _validate_region(region: Region, width: float, height: float, where: str) -> None:
    if region.label not in TUMOR_CLASSES:
        raise UnknownClass(f"{where}: class {region.label!r} is not a tumor class")
    if len(region.vertices) < 3:
        raise DegeneratePolygon(f"{where}: polygon needs >= 3 vertices")
    for x, y in region.vertices:
        if not (0.0 <= x <= width and 0.0 <= y <= height):
            raise ParseError(f"{where}: vertex ({x}, {y}) outside slide {width}x{height}")
    if polygon_area(region.as_array()) == 0.0:
        raise DegeneratePolygon(f"{where}: polygon has zero area")


# --------------------------------------------------------------------------
# PPM / PGM rasters

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_netpbm_header(data: bytes, path: Path) -> tuple[bytes, int, int, int, int]:
    tokens = []
    pos = 0
    for _ in range(4):
        m = _HEADER_TOKEN.match(data, pos)
        if m is None:
            raise CorruptRaster(f"{path}: truncated header")
        tokens.append(m.group(1))
        pos = m.end()
    # exactly one whitespace byte separates maxval from the pixel data
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise CorruptRaster(f"{path}: malformed header")
    magic, w, h, maxval = tokens
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise CorruptRaster(f"{path}: non-integer header field") from exc
    return magic, w, h, maxval, pos + 1


def read_ppm(path: str | os.PathLike, mmap: bool = False) -> np.ndarray:
    """Read a binary P6 (RGB) or P5 (gray) raster with maxval 255."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(512)
        size = path.stat().st_size
    except FileNotFoundError as exc:
        raise MissingLevel(f"{path}: not found") from exc
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    magic, w, h, maxval, offset = _parse_netpbm_header(head, path)
    if magic not in (b"P6", b"P5") or maxval != 255:
        raise CorruptRaster(f"{path}: only P6/P5 with maxval 255 are supported")
    channels = 3 if magic == b"P6" else 1
    shape = (h, w, channels) if channels == 3 else (h, w)
    expected = offset + w * h * channels
    if size != expected:
        raise CorruptRaster(f"{path}: expected {expected} bytes, found {size}")
    if mmap:
        return np.memmap(path, dtype=np.uint8, mode="r", offset=offset, shape=shape)
    with open(path, "rb") as fh:
        fh.seek(offset)
        return np.fromfile(fh, dtype=np.uint8, count=w * h * channels).reshape(shape)


def write_ppm(path: str | os.PathLike, raster: np.ndarray) -> None:
    raster = np.ascontiguousarray(raster, dtype=np.uint8)
    if raster.ndim == 3 and raster.shape[2] == 3:
        magic = b"P6"
    elif raster.ndim == 2:
        magic = b"P5"
    else:
        raise DimensionMismatch(f"cannot write raster of shape {raster.shape}")
    h, w = raster.shape[:2]
    try:
        with open(path, "wb") as fh:
            fh.write(b"%s\n%d %d\n255\n" % (magic, w, h))
            fh.write(raster.tobytes())
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# slides


def read_slide(path: str | os.PathLike, mmap: bool = False) -> SlideImage:
    """Load a slide directory.

    With ``mmap=True`` levels are memory-mapped read-only, so patch reads
    touch only the needed rows.
    """
    path = Path(path)
    meta = _read_meta(path / META_NAME)
    levels = []
    for l in range(meta["levels"]):
        level_path = path / f"level_{l}.ppm"
        if not level_path.exists():
            raise MissingLevel(f"{path}: missing level_{l}.ppm")
        raster = read_ppm(level_path, mmap=mmap)
        if raster.ndim != 3:
            raise CorruptRaster(f"{level_path}: expected an RGB (P6) raster")
        levels.append(raster)
    if levels[0].shape[:2] != (meta["height"], meta["width"]):
        raise DimensionMismatch(
            f"{path}: level_0 is {levels[0].shape[1]}x{levels[0].shape[0]}, "
            f"meta says {meta['width']}x{meta['height']}"
        )
    return SlideImage(levels=levels, tile=meta["tile"])


def _read_meta(path: Path) -> dict[str, int]:
    try:
        text = path.read_text(encoding="ascii")
    except FileNotFoundError as exc:
        raise MissingLevel(f"{path}: meta file not found") from exc
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    meta: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in _META_KEYS:
            raise ParseError(f"{path}:{lineno}: bad meta line {line!r}")
        try:
            meta[parts[0]] = int(parts[1])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {parts[1]!r} is not an integer") from exc
    missing = [k for k in _META_KEYS if k not in meta]
    if missing:
        raise ParseError(f"{path}: missing keys {missing}")
    if meta["levels"] < 1:
        raise ParseError(f"{path}: levels must be >= 1")
    return meta


def write_slide(slide: SlideImage, path: str | os.PathLike) -> None:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / META_NAME).write_text(
            f"width {slide.level0_width}\nheight {slide.level0_height}\n"
            f"levels {slide.level_count}\ntile {slide.tile}\n",
            encoding="ascii",
        )
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    for l, raster in enumerate(slide.levels):
        write_ppm(path / f"level_{l}.ppm", raster)


# --------------------------------------------------------------------------
# annotations


def _format_number(value: float) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() and abs(value) < 2**53 else repr(value)


def parse_annotation(text: str, source: str = "<annotation>") -> AnnotationSet:
    width = height = None
    regions: list[Region] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        parts = line.split()
        if parts[0] == "slide":
            if width is not None or len(parts) != 3:
                raise ParseError(f"{where}: bad slide header")
            try:
                width, height = float(parts[1]), float(parts[2])
            except ValueError as exc:
                raise ParseError(f"{where}: non-numeric slide size") from exc
            continue
        if parts[0] != "region" or len(parts) < 2:
            raise ParseError(f"{where}: expected 'region <class> x,y ...'")
        if width is None:
            raise ParseError(f"{where}: region before 'slide' header")
        try:
            label = TissueClass.from_token(parts[1])
        except KeyError:
            raise UnknownClass(f"{where}: unknown class {parts[1]!r}") from None
        vertices = []
        for pair in parts[2:]:
            xy = pair.split(",")
            if len(xy) != 2:
                raise ParseError(f"{where}: bad vertex {pair!r}")
            try:
                x, y = float(xy[0]), float(xy[1])
            except ValueError as exc:
                raise ParseError(f"{where}: bad vertex {pair!r}") from exc
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError(f"{where}: non-finite vertex {pair!r}")
            vertices.append((x, y))
        region = Region(label, tuple(vertices))
        _validate_region(region, width, height, where)
        regions.append(region)
    if width is None:
        raise ParseError(f"{source}: missing 'slide <width> <height>' header")
    return AnnotationSet(width, height, tuple(regions))


def read_annotation(path: str | os.PathLike) -> AnnotationSet:
    try:
        text = Path(path).read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    return parse_annotation(text, source=str(path))


def format_annotation(annotation: AnnotationSet) -> str:
    lines = [f"slide {_format_number(annotation.width)} {_format_number(annotation.height)}"]
    for region in annotation.regions:
        coords = " ".join(f"{_format_number(x)},{_format_number(y)}" for x, y in region.vertices)
        lines.append(f"region {region.label.token} {coords}")
    return "\n".join(lines) + "\n"


def write_annotation(annotation: AnnotationSet, path: str | os.PathLike) -> None:
    try:
        Path(path).write_text(format_annotation(annotation), encoding="ascii")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# analysis maps


@dataclass
class AnalysisMap:
    """Per-leaf confidences on a ``grid_height x grid_width`` grid.

    ``cells`` has shape ``(grid_height, grid_width, channels)``: one channel
    for the binary map (tumor confidence), three for the multiclass map
    (benign, in situ, invasive).
    """

    cells: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        cells = np.asarray(self.cells, dtype=np.float64)
        if cells.ndim == 2:
            cells = cells[:, :, None]
        if cells.ndim != 3 or cells.shape[2] not in (1, 3):
            raise ValidationError(f"bad analysis map shape {cells.shape}")
        if cells.size and (np.nanmin(cells) < 0.0 or np.nanmax(cells) > 1.0 or np.isnan(cells).any()):
            raise ValidationError("analysis map confidences must lie in [0, 1]")
        self.cells = cells

    @property
    def grid_width(self) -> int:
        return self.cells.shape[1]

    @property
    def grid_height(self) -> int:
        return self.cells.shape[0]

    @classmethod
    def zeros(cls, grid: int, channels: int) -> "AnalysisMap":
        return cls(np.zeros((grid, grid, channels)))


def confidence_to_intensity(values: np.ndarray) -> np.ndarray:
    """confidence * 255 rounded half-up."""
    return np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def render_analysis_map(amap: AnalysisMap, mode: str) -> np.ndarray:
    if mode == "binary":
        if amap.cells.shape[2] != 1:
            raise ValidationError("binary mode needs a single-channel map")
        return confidence_to_intensity(amap.cells[:, :, 0])
    if mode == "multiclass":
        if amap.cells.shape[2] != 3:
            raise ValidationError("multiclass mode needs a three-channel map")
        return confidence_to_intensity(amap.cells)
    raise ValidationError(f"unknown map mode {mode!r}")


def write_analysis_map(amap: AnalysisMap, path: str | os.PathLike, mode: str) -> None:
    write_ppm(path, render_analysis_map(amap, mode))


def read_analysis_raster(path: str | os.PathLike) -> np.ndarray:
    return read_ppm(path)


def annotation_from_regions(
    width: float, height: float, regions: Sequence[tuple[TissueClass, Sequence[tuple[float, float]]]]
) -> AnnotationSet:
    return AnnotationSet(
        width, height, tuple(Region(c, tuple((float(x), float(y)) for x, y in v)) for c, v in regions)
    )
