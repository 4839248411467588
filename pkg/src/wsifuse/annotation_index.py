"""R-tree over annotation polygons and per-quad class coverage.

Coverage is measured by sampling an ``S x S`` grid of cell centres over the
query rectangle and testing each sample against the candidate polygons
(even-odd rule). Polygons of the same class are unioned, so overlaps are not
double counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .classes import TUMOR_CLASSES, TissueClass
from .pyramid import TPyramid
from .slide_io import AnnotationSet, Region

BBox = tuple[float, float, float, float]  # xmin, ymin, xmax, ymax

DEFAULT_SAMPLES = 64


def _area(b: BBox) -> float:
    return (b[2] - b[0]) * (b[3] - b[1])


def _union(a: BBox, b: BBox) -> BBox:
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def _intersects(a: BBox, b: BBox) -> bool:
    return a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]


@dataclass(eq=False)
class _Node:
    leaf: bool
    boxes: list[BBox] = field(default_factory=list)
    items: list = field(default_factory=list)  # region ids (leaf) or child nodes
    parent: "_Node | None" = None

    def bbox(self) -> BBox:
        box = self.boxes[0]
        for b in self.boxes[1:]:
            box = _union(box, b)
        return box


class RTree:
    """Guttman R-tree with quadratic split.

    Only insertion and window search are supported; the index is built once
    and then queried.
    """

    def __init__(self, max_entries: int = 8, min_entries: int | None = None):
        if max_entries < 2:
            raise ValueError("max_entries must be >= 2")
        self.max_entries = max_entries
        self.min_entries = min_entries if min_entries is not None else max(1, max_entries * 2 // 5)
        self.root = _Node(leaf=True)
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def insert(self, box: BBox, item: int) -> None:
        leaf = self._choose_leaf(box)
        leaf.boxes.append(box)
        leaf.items.append(item)
        self._size += 1
        self._adjust(leaf)

    def search(self, box: BBox) -> list[int]:
        out: list[int] = []
        if self._size == 0:
            return out
        stack = [self.root]
        while stack:
            node = stack.pop()
            for b, item in zip(node.boxes, node.items):
                if _intersects(b, box):
                    if node.leaf:
                        out.append(item)
                    else:
                        stack.append(item)
        out.sort()
        return out

    def depth(self) -> int:
        d, node = 1, self.root
        while not node.leaf:
            node = node.items[0]
            d += 1
        return d

    def _choose_leaf(self, box: BBox) -> _Node:
        node = self.root
        while not node.leaf:
            best, best_key = 0, None
            for i, b in enumerate(node.boxes):
                area = _area(b)
                key = (_area(_union(b, box)) - area, area)
                if best_key is None or key < best_key:
                    best, best_key = i, key
            node = node.items[best]
        return node

    def _adjust(self, node: _Node) -> None:
        while True:
            sibling = self._split(node) if len(node.items) > self.max_entries else None
            parent = node.parent
            if parent is None:
                if sibling is not None:
                    root = _Node(leaf=False, boxes=[node.bbox(), sibling.bbox()], items=[node, sibling])
                    node.parent = sibling.parent = root
                    self.root = root
                return
            idx = next(i for i, child in enumerate(parent.items) if child is node)
            parent.boxes[idx] = node.bbox()
            if sibling is not None:
                sibling.parent = parent
                parent.boxes.append(sibling.bbox())
                parent.items.append(sibling)
            node = parent

    def _split(self, node: _Node) -> _Node:
        boxes, items = node.boxes, node.items
        n = len(boxes)
        # quadratic pick-seeds: the pair wasting the most area together
        worst, seeds = -np.inf, (0, 1)
        for i in range(n):
            for j in range(i + 1, n):
                waste = _area(_union(boxes[i], boxes[j])) - _area(boxes[i]) - _area(boxes[j])
                if waste > worst:
                    worst, seeds = waste, (i, j)
        groups = [[seeds[0]], [seeds[1]]]
        covers = [boxes[seeds[0]], boxes[seeds[1]]]
        rest = [k for k in range(n) if k not in seeds]
        while rest:
            for g in (0, 1):
                if len(groups[g]) + len(rest) == self.min_entries:
                    groups[g].extend(rest)
                    for k in rest:
                        covers[g] = _union(covers[g], boxes[k])
                    rest = []
                    break
            if not rest:
                break
            # pick-next: entry with the strongest preference for one group
            best_k, best_diff, best_d = rest[0], -1.0, (0.0, 0.0)
            for k in rest:
                d0 = _area(_union(covers[0], boxes[k])) - _area(covers[0])
                d1 = _area(_union(covers[1], boxes[k])) - _area(covers[1])
                if abs(d0 - d1) > best_diff:
                    best_k, best_diff, best_d = k, abs(d0 - d1), (d0, d1)
            d0, d1 = best_d
            if d0 != d1:
                g = 0 if d0 < d1 else 1
            elif _area(covers[0]) != _area(covers[1]):
                g = 0 if _area(covers[0]) < _area(covers[1]) else 1
            else:
                g = 0 if len(groups[0]) <= len(groups[1]) else 1
            groups[g].append(best_k)
            covers[g] = _union(covers[g], boxes[best_k])
            rest.remove(best_k)
        sibling = _Node(leaf=node.leaf)
        node.boxes, node.items = [boxes[k] for k in groups[0]], [items[k] for k in groups[0]]
        sibling.boxes, sibling.items = [boxes[k] for k in groups[1]], [items[k] for k in groups[1]]
        if not node.leaf:
            for child in sibling.items:
                child.parent = sibling
        return sibling


# --------------------------------------------------------------------------
# geometry


def points_in_polygon(xs: np.ndarray, ys: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test, vectorised over points."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    x1, y1 = vertices[:, 0], vertices[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    for ax, ay, bx, by in zip(x1, y1, x2, y2):
        if ay == by:
            continue
        crosses = (ay > ys) != (by > ys)
        x_at = ax + (ys - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (xs < x_at)
    return inside


def sample_grid(rect: tuple[float, float, float, float], samples: int) -> tuple[np.ndarray, np.ndarray]:
    x, y, w, h = rect
    t = (np.arange(samples) + 0.5) / samples
    return np.meshgrid(x + t * w, y + t * h)


@dataclass(frozen=True)
class FractionReport:
    """Covered fraction of a rectangle per tumor class (benign, insitu, invasive)."""

    fractions: tuple[float, float, float]
    covered: float

    @property
    def normal_fraction(self) -> float:
        return min(1.0, max(0.0, 1.0 - self.covered))

    def __getitem__(self, cls: TissueClass) -> float:
        if cls == TissueClass.NORMAL:
            return self.normal_fraction
        return self.fractions[TUMOR_CLASSES.index(cls)]


def class_fractions(
    regions: Iterable[Region], rect: tuple[float, float, float, float], samples: int = DEFAULT_SAMPLES
) -> FractionReport:
    """Grid-sampled coverage of ``rect`` by each class's polygon union."""
    xs, ys = sample_grid(rect, samples)
    masks = {c: np.zeros(xs.shape, dtype=bool) for c in TUMOR_CLASSES}
    for region in regions:
        masks[region.label] |= points_in_polygon(xs, ys, region.as_array())
    total = xs.size
    covered = np.zeros(xs.shape, dtype=bool)
    for m in masks.values():
        covered |= m
    return FractionReport(
        tuple(float(masks[c].sum()) / total for c in TUMOR_CLASSES),
        float(covered.sum()) / total,
    )


# --------------------------------------------------------------------------
# index


class RegionIndex:
    """Immutable R-tree over the regions of an annotation set."""

    def __init__(self, annotation: AnnotationSet, max_entries: int = 8):
        self.annotation = annotation
        self.regions = annotation.regions
        self.bboxes: list[BBox] = [r.bbox for r in self.regions]
        self.tree = RTree(max_entries=max_entries)
        for i, box in enumerate(self.bboxes):
            self.tree.insert(box, i)

    def __len__(self) -> int:
        return len(self.regions)

    def candidates(self, rect: tuple[float, float, float, float]) -> list[int]:
        """Region ids whose bounding boxes meet the (x, y, w, h) rectangle."""
        x, y, w, h = rect
        return self.tree.search((x, y, x + w, y + h))


def build_rtree(annotation: AnnotationSet, max_entries: int = 8) -> RegionIndex:
    return RegionIndex(annotation, max_entries=max_entries)


def query_fractions(
    index: RegionIndex, quad_rect: tuple[float, float, float, float], samples: int = DEFAULT_SAMPLES
) -> FractionReport:
    return class_fractions((index.regions[i] for i in index.candidates(quad_rect)), quad_rect, samples)


@dataclass(frozen=True)
class LabelPolicy:
    min_fraction: float = 0.5
    samples: int = DEFAULT_SAMPLES


def label_quad(fractions: FractionReport, policy: LabelPolicy = LabelPolicy()) -> TissueClass:
    """Most-covered tumor class if it reaches ``min_fraction``, else Normal.

    Ties go to the more severe class (later in benign < insitu < invasive).
    """
    values = np.asarray(fractions.fractions)
    best = len(values) - 1 - int(np.argmax(values[::-1]))
    if values[best] >= policy.min_fraction:
        return TUMOR_CLASSES[best]
    return TissueClass.NORMAL


def label_pyramid(pyramid: TPyramid, index: RegionIndex, policy: LabelPolicy = LabelPolicy()) -> None:
    """Assign a label to every quad of ``pyramid``."""
    for quad in pyramid:
        quad.label = label_quad(query_fractions(index, quad.rect, policy.samples), policy)


def leaf_label_grid(
    annotation: AnnotationSet, width: int, height: int, depth: int, policy: LabelPolicy = LabelPolicy()
) -> np.ndarray:
    """Ground-truth leaf label grid of a depth-``depth`` T-pyramid."""
    pyramid = TPyramid.build(width, height, depth)
    index = build_rtree(annotation)
    for quad in pyramid.leaves:
        quad.label = label_quad(query_fractions(index, quad.rect, policy.samples), policy)
    return pyramid.label_grid()


def regions_of(index: RegionIndex, ids: Sequence[int]) -> list[Region]:
    return [index.regions[i] for i in ids]
