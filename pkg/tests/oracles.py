"""Independent reference computations shared by the unit and acceptance tests."""

import mpmath
import numpy as np
from matplotlib.path import Path as MplPath
from shapely.geometry import Polygon

from wsifuse.classes import TUMOR_CLASSES
from wsifuse.slide_io import AnnotationSet, Region


def convex_polygon(rng, cx, cy, r, n=None):
    n = n or int(rng.integers(3, 9))
    t = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(0.4, 1.0, n) * r
    pts = np.column_stack([cx + rad * np.cos(t), cy + rad * np.sin(t)])
    return np.asarray(Polygon(pts).convex_hull.exterior.coords)[:-1]


def random_annotation(rng, size=1000.0, count=10):
    regions = []
    while len(regions) < count:
        r = rng.uniform(20, 200)
        cx, cy = rng.uniform(r, size - r, 2)
        pts = convex_polygon(rng, cx, cy, r)
        if Polygon(pts).area > 1.0:
            regions.append(Region(TUMOR_CLASSES[int(rng.integers(3))], tuple(map(tuple, pts))))
    return AnnotationSet(size, size, tuple(regions))


def dense_oracle(regions, rect, n=512):
    """Per-class covered fraction on an n x n grid using matplotlib's point test."""
    x, y, w, h = rect
    t = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(x + t * w, y + t * h)
    pts = np.column_stack([xs.ravel(), ys.ravel()])
    out = []
    for c in TUMOR_CLASSES:
        mask = np.zeros(len(pts), bool)
        for r in regions:
            if r.label == c:
                mask |= MplPath(r.as_array()).contains_points(pts)
        out.append(mask.mean())
    return np.array(out)


P_EXAMPLE = np.array([[0.9, 0.05, 0.05], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6], [0.3, 0.3, 0.4], [0.5, 0.25, 0.25], [0.0, 0.0, 1.0]])
W_EXAMPLE = np.array([0.5, 0.3, 0.2, 0.0, 0.0, 0.0])


def exact_softmax_example():
    mpmath.mp.dps = 40
    P = [[mpmath.mpf(str(v)) for v in row] for row in P_EXAMPLE[:3]]
    w = [mpmath.mpf("0.5"), mpmath.mpf("0.3"), mpmath.mpf("0.2")]
    s = [sum(w[l] * P[l][i] for l in range(3)) for i in range(3)]
    e = [mpmath.exp(v) for v in s]
    return s, [v / sum(e) for v in e]
