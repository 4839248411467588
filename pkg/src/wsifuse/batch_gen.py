"""Class-balanced, seeded mini-batch production over analyzed slides.

Samples from every source slide are unified into one pool per class. Each
pool is walked in a seeded random order without replacement; a pool that
runs out is reshuffled on its own (a new epoch for that class only), so
every batch holds exactly ``batch_size / n_classes`` samples per class no
matter how unequal the pools are. Pools store quad identities only; patches
are read when a batch is assembled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .classes import TissueClass
from .errors import Exhausted, MissingClass, ValidationError
from .pyramid import Patch, PatchStack, Quality, TPyramid, context_stack, extract_patch
from .slide_io import SlideImage

SampleId = tuple[int, int, int, int]  # (source, depth, gx, gy)


@dataclass
class SlideSource:
    """A slide with its T-pyramid; quads must carry labels (and quality if filtered on)."""

    slide: SlideImage
    pyramid: TPyramid


@dataclass(frozen=True)
class ProducerParams:
    classes: tuple[str, ...]
    depths: tuple[int, ...]
    batch_size: int
    seed: int = 0
    quality: Quality | None = Quality.TISSUE
    patch_transform: Callable[[np.ndarray], np.ndarray] | None = None
    label_map: Mapping[TissueClass, str] | None = None
    stacks: bool = False  # yield leaf context stacks instead of single patches

    def __post_init__(self) -> None:
        if not self.classes or len(set(self.classes)) != len(self.classes):
            raise ValidationError("classes must be a non-empty ordered set")
        if self.batch_size <= 0 or self.batch_size % len(self.classes):
            raise ValidationError(
                f"batch_size {self.batch_size} must be a positive multiple of {len(self.classes)} classes"
            )

    def class_of(self, label: TissueClass | None) -> str | None:
        if label is None:
            return None
        if self.label_map is not None:
            return self.label_map.get(label)
        return label.token


@dataclass
class LabeledBatch:
    ids: list[SampleId]
    labels: np.ndarray  # (batch, n_classes) one-hot in the global class order
    patches: list[Patch] | None = field(default=None, repr=False)
    stacks: list[PatchStack] | None = field(default=None, repr=False)

    def pixels(self) -> np.ndarray:
        return np.stack([p.pixels for p in self.patches])

    def class_indices(self) -> np.ndarray:
        return self.labels.argmax(axis=1)


class _Pool:
    def __init__(self, ids: list[SampleId], rng: np.random.Generator):
        self.ids = ids
        self.rng = rng
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0
        self.epoch = 0

    def take(self, k: int) -> list[SampleId]:
        out = []
        while len(out) < k:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(len(self.ids))
                self.pos = 0
                self.epoch += 1
            n = min(k - len(out), len(self.order) - self.pos)
            out.extend(self.ids[i] for i in self.order[self.pos : self.pos + n])
            self.pos += n
        return out


class BatchGenerator:
    """Infinite stream of :class:`LabeledBatch` objects."""

    def __init__(self, sources: Sequence[SlideSource], params: ProducerParams):
        self.sources = list(sources)
        self.params = params
        pools: dict[str, list[SampleId]] = {c: [] for c in params.classes}
        for s, source in enumerate(self.sources):
            for depth in params.depths:
                if not 0 <= depth < source.pyramid.depth:
                    raise ValidationError(f"depth {depth} not in source {s}'s pyramid")
                if params.stacks and depth != source.pyramid.depth - 1:
                    raise ValidationError("context stacks are only defined for leaf depth")
                for quad in source.pyramid.nodes[depth]:
                    if params.quality is not None and quad.quality != params.quality:
                        continue
                    cls = params.class_of(quad.label)
                    if cls in pools:
                        pools[cls].append((s, quad.depth, quad.grid_x, quad.grid_y))
        missing = [c for c, ids in pools.items() if not ids]
        if missing:
            raise MissingClass(f"no samples for classes {missing} in any source")
        seq = np.random.SeedSequence(params.seed)
        self._pools = [_Pool(pools[c], np.random.default_rng(child)) for c, child in zip(params.classes, seq.spawn(len(params.classes)))]
        self._onehot = np.eye(len(params.classes))

    @property
    def pool_sizes(self) -> dict[str, int]:
        return {c: len(p.ids) for c, p in zip(self.params.classes, self._pools)}

    def __iter__(self) -> Iterator[LabeledBatch]:
        return self

    def __next__(self) -> LabeledBatch:
        return self.next_batch()

    def next_ids(self) -> tuple[list[SampleId], np.ndarray]:
        per_class = self.params.batch_size // len(self.params.classes)
        ids: list[SampleId] = []
        idx: list[int] = []
        for c, pool in enumerate(self._pools):
            if not pool.ids:
                raise Exhausted(f"class {self.params.classes[c]!r} has no samples")
            ids.extend(pool.take(per_class))
            idx.extend([c] * per_class)
        return ids, self._onehot[idx]

    def next_batch(self) -> LabeledBatch:
        ids, labels = self.next_ids()
        if self.params.stacks:
            return LabeledBatch(ids, labels, stacks=[self._stack(i) for i in ids])
        return LabeledBatch(ids, labels, patches=[self._patch(i) for i in ids])

    def _patch(self, sid: SampleId) -> Patch:
        s, d, gx, gy = sid
        source = self.sources[s]
        patch = extract_patch(source.slide, source.pyramid.quad(d, gx, gy))
        if self.params.patch_transform is not None:
            patch = Patch(np.asarray(self.params.patch_transform(patch.pixels)), patch.source_quad, patch.source_level)
        return patch

    def _stack(self, sid: SampleId) -> PatchStack:
        s, d, gx, gy = sid
        source = self.sources[s]
        stack = context_stack(source.slide, source.pyramid, source.pyramid.quad(d, gx, gy))
        if self.params.patch_transform is None:
            return stack
        t = self.params.patch_transform
        return PatchStack(tuple(Patch(np.asarray(t(p.pixels)), p.source_quad, p.source_level) for p in stack.patches))


def make_generator(sources: Sequence[SlideSource], params: ProducerParams) -> BatchGenerator:
    return BatchGenerator(sources, params)


def next_batch(generator: BatchGenerator) -> LabeledBatch:
    return generator.next_batch()
