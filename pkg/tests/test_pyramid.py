import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsifuse.errors import DepthExceedsLevels, NotALeaf, OutOfBounds
from wsifuse.pyramid import (
    Quad,
    Quality,
    QualityThresholds,
    TPyramid,
    assess_pyramid,
    assess_quality,
    build_tpyramid,
    context_stack,
    extract_patch,
)
from wsifuse.slide_io import SlideImage, level_shape
from wsifuse.synth import ClassTexture, SynthSpec, make_synthetic_slide


def random_slide(rng, width, height, levels, tile):
    out = []
    for l in range(levels):
        w, h = level_shape(width, height, l)
        out.append(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))
    return SlideImage(out, tile=tile)


def test_node_counts():
    p = TPyramid.build(8192, 8192, 6)
    assert len(p) == 1365
    assert [len(level) for level in p.nodes] == [4**d for d in range(6)]


def test_depth_one_is_whole_slide():
    p = TPyramid.build(300, 200, 1)
    assert len(p) == 1
    assert p.quad(0, 0, 0).rect == (0.0, 0.0, 300.0, 200.0)


def test_depth_exceeding_levels(rng):
    slide = random_slide(rng, 64, 64, 6, 2)
    with pytest.raises(DepthExceedsLevels):
        build_tpyramid(slide, 7)
    assert len(build_tpyramid(slide, 6)) == 1365


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20000), st.integers(1, 20000), st.integers(1, 6))
def test_children_tile_parents(width, height, depth):
    p = TPyramid.build(width, height, depth)
    for quad in p:
        n = 2**quad.depth
        assert quad.rect == (quad.grid_x * width / n, quad.grid_y * height / n, width / n, height / n)
        kids = p.children(quad)
        if quad.depth == depth - 1:
            assert kids == []
            continue
        x, y, w, h = quad.rect
        assert sum(k.rect[2] * k.rect[3] for k in kids) == pytest.approx(w * h, rel=1e-12)
        xs = sorted({k.rect[0] for k in kids})
        ys = sorted({k.rect[1] for k in kids})
        assert xs == [x, x + w / 2] and ys == [y, y + h / 2]
        for k in kids:
            assert k.rect[0] + k.rect[2] <= x + w and k.rect[1] + k.rect[3] <= y + h
            assert p.parent(k) is quad


def test_ancestor_chain_and_bounds():
    p = TPyramid.build(64, 64, 4)
    leaf = p.quad(3, 5, 6)
    chain = p.ancestors(leaf)
    assert [q.key for q in chain] == [(0, 0, 0), (1, 1, 1), (2, 2, 3), (3, 5, 6)]
    with pytest.raises(OutOfBounds):
        p.quad(3, 8, 0)
    with pytest.raises(OutOfBounds):
        p.quad(4, 0, 0)


def test_aligned_slides_never_resample(rng):
    slide = random_slide(rng, 64, 64, 4, 8)
    p = build_tpyramid(slide, 4)
    for quad in p:
        patch = extract_patch(slide, quad)
        level = slide.levels[3 - quad.depth]
        x, y = quad.grid_x * 8, quad.grid_y * 8
        assert patch.source_level == 3 - quad.depth
        assert patch.pixels.tobytes() == level[y : y + 8, x : x + 8].tobytes()


def test_root_patch_is_coarsest_level(small_synth):
    slide = small_synth.slide
    p = build_tpyramid(slide, 6)
    assert extract_patch(slide, p.quad(0, 0, 0)).pixels.tobytes() == slide.levels[-1].tobytes()


def test_solid_region_gives_solid_patch():
    tex = dict(SynthSpec().textures)
    tex["invasive"] = ClassTexture((200, 10, 10))
    spec = SynthSpec(size=256, levels=6, tile=8, regions=3, normal_regions=0, class_mix=(0, 0, 1), textures=tex)
    res = make_synthetic_slide(spec)
    p = build_tpyramid(res.slide, 6)
    region = res.annotation.regions[0].as_array()
    x0, y0 = region.min(axis=0)
    inside = [q for q in p if q.rect[0] >= x0 and q.rect[1] >= y0 and q.rect[0] + q.rect[2] <= x0 + 32 and q.rect[1] + q.rect[3] <= y0 + 32]
    assert inside
    for q in inside:
        patch = extract_patch(res.slide, q).pixels
        assert (patch == np.array([200, 10, 10], dtype=np.uint8)).all()


def test_resampling_is_nearest_and_deterministic(rng):
    slide = random_slide(rng, 100, 60, 3, 16)
    p = build_tpyramid(slide, 3)
    for quad in p:
        a = extract_patch(slide, quad).pixels
        b = extract_patch(slide, quad).pixels
        assert a.shape == (16, 16, 3) and a.tobytes() == b.tobytes()
    # root quad reads level 2 (25 x 15) through nearest indices
    level = slide.levels[2]
    patch = extract_patch(slide, p.quad(0, 0, 0)).pixels
    rows = np.floor((np.arange(16) + 0.5) * 15 / 16).astype(int)
    cols = np.floor((np.arange(16) + 0.5) * 25 / 16).astype(int)
    assert patch.tobytes() == level[np.ix_(rows, cols)].tobytes()


def test_extract_out_of_bounds(rng):
    slide = random_slide(rng, 32, 32, 2, 16)
    with pytest.raises(OutOfBounds):
        extract_patch(slide, Quad(2, 0, 0, (0.0, 0.0, 8.0, 8.0)))
    with pytest.raises(OutOfBounds):
        extract_patch(slide, Quad(1, 2, 0, (32.0, 0.0, 16.0, 16.0)))


def test_context_stack(small_synth):
    slide = small_synth.slide
    p = build_tpyramid(slide, 6)
    a = context_stack(slide, p, p.quad(5, 10, 12))
    b = context_stack(slide, p, p.quad(5, 11, 12))
    assert len(a) == 6 and a.patches[0].source_quad == (0, 0, 0) and a.leaf == (5, 10, 12)
    for i in range(5):
        assert a.patches[i].pixels.tobytes() == b.patches[i].pixels.tobytes()
    assert a.patches[5].source_quad != b.patches[5].source_quad
    with pytest.raises(NotALeaf):
        context_stack(slide, p, p.quad(4, 0, 0))


def test_depth_one_stack_is_whole_slide(rng):
    slide = random_slide(rng, 16, 16, 1, 16)
    p = build_tpyramid(slide, 1)
    stack = context_stack(slide, p, p.quad(0, 0, 0))
    assert len(stack) == 1 and stack.patches[0].pixels.tobytes() == slide.levels[0].tobytes()


def test_quality_examples():
    white = np.full((16, 16, 3), 255, np.uint8)
    tissue = np.tile(np.array([100, 50, 150], np.uint8), (16, 16, 1))
    assert assess_quality(white) == (Quality.BACKGROUND, 0.0)
    assert assess_quality(tissue) == (Quality.TISSUE, 1.0)
    half = white.copy()
    half[:, :8] = (100, 50, 150)
    assert assess_quality(half) == (Quality.TISSUE, 0.5)
    # threshold is strict: min channel 220 is tissue, 221 is background
    assert assess_quality(np.full((2, 2, 3), 220, np.uint8))[1] == 1.0
    assert assess_quality(np.full((2, 2, 3), 221, np.uint8))[1] == 0.0


def test_quality_fraction_matches_brute_force(rng):
    for _ in range(20):
        px = rng.integers(150, 256, (12, 12, 3), dtype=np.uint8)
        expected = sum(1 for row in px for p in row if not min(p) > 220) / 144
        q, frac = assess_quality(px, QualityThresholds(220, 0.3))
        assert frac == pytest.approx(expected, abs=1e-15)
        assert q == (Quality.TISSUE if expected >= 0.3 else Quality.BACKGROUND)


def test_assess_pyramid_fills_every_quad(small_synth):
    p = build_tpyramid(small_synth.slide, 6)
    assess_pyramid(small_synth.slide, p)
    assert all(q.quality is not None and 0.0 <= q.tissue_fraction <= 1.0 for q in p)
