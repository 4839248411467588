"""End-to-end slide analysis and evaluation.

Flow for one slide: build the T-pyramid, drop background leaves, score the
remaining leaves with the binary expert and keep those above the proposal
gate, classify every patch of each kept leaf's context stack with the
multi-class expert, and (for the weighing strategy) fuse the per-level
distributions with the learned level weights.

Strategies:

``multiclass_only``      every tissue leaf, finest-level prediction
``multiclass_pipeline``  gated leaves, finest-level prediction
``weighing_pipeline``    gated leaves, weighted fusion of all levels

Everything is recorded in an append-only text log, one line per leaf in
row-major order, from which maps and reports are derived.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .annotation_index import LabelPolicy, build_rtree, label_pyramid, leaf_label_grid
from .batch_gen import BatchGenerator, ProducerParams, SlideSource
from .classes import BINARY_TOKENS, TUMOR_CLASSES, TUMOR_TOKENS, TissueClass
from .errors import IoFailure, ParseError, ShapeMismatch, ValidationError
from .experts import ExpertHyper, FeatureExpert, train_feature_expert
from .fusion import FixedWeights, WeightModel, prepare_stack, prepare_stacks, weighted_fuse
from .metrics import (
    ClassificationMetrics,
    ConfusionMatrix,
    FlipCounts,
    classification_metrics,
    flip_accounting,
    flip_metrics,
    iou,
    roc_auc,
)
from .pyramid import (
    Patch,
    PatchStack,
    Quality,
    QualityThresholds,
    QuadKey,
    TPyramid,
    assess_pyramid,
    assess_quality,
    build_tpyramid,
    extract_patch,
)
from .slide_io import AnalysisMap, AnnotationSet, SlideImage, write_analysis_map

STRATEGIES = ("multiclass_only", "multiclass_pipeline", "weighing_pipeline")
ALL_CLASSES = (TissueClass.NORMAL,) + TUMOR_CLASSES


@dataclass(frozen=True)
class PipelineConfig:
    depth: int = 6
    brightness_threshold: int = 220
    min_tissue: float = 0.10
    gate: float = 0.3
    strategy: str = "weighing_pipeline"
    binary_expert: str | None = None
    multiclass_expert: str | None = None
    weigher: str | None = None
    seed: int = 0
    out: str | None = None
    batch: int = 256

    def validate(self) -> None:
        if not 0.0 <= self.gate <= 1.0:
            raise ValidationError(f"gate {self.gate} outside [0, 1]")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")

    @property
    def gated(self) -> bool:
        return self.strategy != "multiclass_only"

    @property
    def thresholds(self) -> QualityThresholds:
        return QualityThresholds(self.brightness_threshold, self.min_tissue)

    def required_checkpoints(self) -> tuple[str, ...]:
        need = ["multiclass_expert"]
        if self.gated:
            need.append("binary_expert")
        if self.strategy == "weighing_pipeline":
            need.append("weigher")
        return tuple(need)


_CONFIG_TYPES = {
    "depth": int, "brightness_threshold": int, "min_tissue": float, "gate": float,
    "strategy": str, "binary_expert": str, "multiclass_expert": str, "weigher": str,
    "seed": int, "out": str, "batch": int,
}


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2 or parts[0] not in _CONFIG_TYPES:
            raise ParseError(f"{source}:{lineno}: bad config line {line!r}")
        try:
            values[parts[0]] = _CONFIG_TYPES[parts[0]](parts[1].strip())
        except ValueError as exc:
            raise ParseError(f"{source}:{lineno}: bad value for {parts[0]}") from exc
    config = PipelineConfig(**values)
    config.validate()
    return config


def read_config(path: str | Path) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    return parse_config(text, str(path))


# --------------------------------------------------------------------------
# analysis records


@dataclass
class LeafRecord:
    grid_x: int
    grid_y: int
    quality: Quality
    tissue_fraction: float
    gate: float | None = None
    analyzed: bool = False
    levels: np.ndarray | None = field(default=None, repr=False)  # (L, 3)
    weights: np.ndarray | None = field(default=None, repr=False)  # (L,)
    fused: np.ndarray | None = field(default=None, repr=False)  # (3,)
    base_label: TissueClass = TissueClass.NORMAL
    label: TissueClass = TissueClass.NORMAL


@dataclass
class AnalysisLog:
    width: int
    height: int
    depth: int
    strategy: str
    gate: float
    records: list[LeafRecord] = field(repr=False)

    @property
    def grid_size(self) -> int:
        return 2 ** (self.depth - 1)

    def label_grid(self, base: bool = False) -> np.ndarray:
        g = self.grid_size
        grid = np.zeros((g, g), dtype=np.int64)
        for r in self.records:
            grid[r.grid_y, r.grid_x] = int(r.base_label if base else r.label)
        return grid


@dataclass
class AnalysisResult:
    binary_map: AnalysisMap
    multiclass_map: AnalysisMap
    log: AnalysisLog


@dataclass
class ExpertSet:
    multiclass: object
    binary: object | None = None
    weigher: WeightModel | FixedWeights | None = None


def _positive_index(expert) -> int:
    classes = tuple(expert.classes)
    if "tumor" not in classes:
        raise ValidationError(f"binary expert classes {classes} lack 'tumor'")
    return classes.index("tumor")


def _classify(expert, patches: Sequence[Patch], batch: int) -> np.ndarray:
    out = []
    for start in range(0, len(patches), batch):
        out.append(np.asarray(expert.classify_patches(patches[start : start + batch]), dtype=np.float64))
    return np.concatenate(out) if out else np.empty((0, len(expert.classes)))


def analyze_slide(slide: SlideImage, config: PipelineConfig, experts: ExpertSet) -> AnalysisResult:
    config.validate()
    if tuple(experts.multiclass.classes) != TUMOR_TOKENS:
        raise ValidationError(f"multi-class expert classes must be {TUMOR_TOKENS}")
    if config.gated and experts.binary is None:
        raise ValidationError(f"strategy {config.strategy} needs a binary expert")
    if config.strategy == "weighing_pipeline":
        if experts.weigher is None:
            raise ValidationError("weighing_pipeline needs a weigher")
        if experts.weigher.levels != config.depth:
            raise ShapeMismatch(f"weigher has {experts.weigher.levels} levels, pyramid depth is {config.depth}")

    pyramid = build_tpyramid(slide, config.depth)
    records: list[LeafRecord] = []
    tissue: list[int] = []
    leaf_patches: list[Patch] = []
    for quad in pyramid.leaves:
        patch = extract_patch(slide, quad)
        quality, frac = assess_quality(patch, config.thresholds)
        records.append(LeafRecord(quad.grid_x, quad.grid_y, quality, frac))
        if quality == Quality.TISSUE:
            tissue.append(len(records) - 1)
            leaf_patches.append(patch)

    if config.gated:
        scores = _classify(experts.binary, leaf_patches, config.batch)[:, _positive_index(experts.binary)]
        for i, s in zip(tissue, scores):
            records[i].gate = float(s)
        proposed = [i for i in tissue if records[i].gate > config.gate]
    else:
        proposed = list(tissue)

    _classify_stacks(slide, pyramid, [records[i] for i in proposed], experts, config)
    result_log = AnalysisLog(slide.level0_width, slide.level0_height, config.depth, config.strategy, config.gate, records)
    binary_map, multiclass_map = render_maps(result_log)
    return AnalysisResult(binary_map, multiclass_map, result_log)


def _classify_stacks(slide: SlideImage, pyramid: TPyramid, records: list[LeafRecord], experts: ExpertSet, config: PipelineConfig) -> None:
    if not records:
        return
    leaves = [pyramid.quad(pyramid.depth - 1, r.grid_x, r.grid_y) for r in records]
    chains = [pyramid.ancestors(q) for q in leaves]
    # ancestors are shared between leaves: read and classify each quad once
    unique: dict[QuadKey, int] = {}
    patches: list[Patch] = []
    for chain in chains:
        for q in chain:
            if q.key not in unique:
                unique[q.key] = len(patches)
                patches.append(extract_patch(slide, q))
    dists = _classify(experts.multiclass, patches, config.batch)

    weighing = config.strategy == "weighing_pipeline"
    for start in range(0, len(records), config.batch):
        chunk = range(start, min(len(records), start + config.batch))
        stacks = [PatchStack(tuple(patches[unique[q.key]] for q in chains[i])) for i in chunk]
        if weighing:
            if isinstance(experts.weigher, WeightModel):
                w = experts.weigher.weights(prepare_stacks(stacks, experts.weigher.spec.input_size))
            else:
                w = np.stack([experts.weigher.predict(s) for s in stacks])
        for j, i in enumerate(chunk):
            rec = records[i]
            rec.analyzed = True
            rec.levels = np.stack([dists[unique[q.key]] for q in chains[i]])
            rec.base_label = TUMOR_CLASSES[int(np.argmax(rec.levels[-1]))]
            if weighing:
                rec.weights = w[j]
                rec.fused = weighted_fuse(w[j], rec.levels).w_softmax
                rec.label = TUMOR_CLASSES[int(np.argmax(rec.fused))]
            else:
                rec.label = rec.base_label


def render_maps(log: AnalysisLog) -> tuple[AnalysisMap, AnalysisMap]:
    """Binary (gate score) and multiclass (final distribution) maps of the leaf grid."""
    g = log.grid_size
    binary = np.zeros((g, g, 1))
    multi = np.zeros((g, g, 3))
    for r in log.records:
        if r.gate is not None:
            binary[r.grid_y, r.grid_x, 0] = r.gate
        if r.analyzed:
            multi[r.grid_y, r.grid_x] = r.fused if r.fused is not None else r.levels[-1]
    return AnalysisMap(np.clip(binary, 0.0, 1.0)), AnalysisMap(np.clip(multi, 0.0, 1.0))


def write_maps(log: AnalysisLog, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"{out_dir}: {exc}") from exc
    binary, multi = render_maps(log)
    bpath, mpath = out_dir / "binary_map.pgm", out_dir / "multiclass_map.ppm"
    write_analysis_map(binary, bpath, "binary")
    write_analysis_map(multi, mpath, "multiclass")
    return bpath, mpath


# --------------------------------------------------------------------------
# log serialisation

_LOG_MAGIC = "# wsifuse analysis log 1"
_COLUMNS = ("gx", "gy", "quality", "tissue", "gate", "analyzed", "levels", "weights", "fused", "base", "label")


def _fmt_vec(v: np.ndarray | None) -> str:
    return "-" if v is None else ",".join(repr(float(x)) for x in np.ravel(v))


def _fmt_mat(m: np.ndarray | None) -> str:
    return "-" if m is None else ";".join(_fmt_vec(row) for row in m)


def format_log(log: AnalysisLog) -> str:
    lines = [
        _LOG_MAGIC,
        f"# width {log.width}",
        f"# height {log.height}",
        f"# depth {log.depth}",
        f"# strategy {log.strategy}",
        f"# gate {log.gate!r}",
        "# classes " + ",".join(TUMOR_TOKENS),
        "\t".join(_COLUMNS),
    ]
    for r in log.records:
        lines.append("\t".join([
            str(r.grid_x), str(r.grid_y), r.quality.value, repr(float(r.tissue_fraction)),
            "-" if r.gate is None else repr(float(r.gate)), "1" if r.analyzed else "0",
            _fmt_mat(r.levels), _fmt_vec(r.weights), _fmt_vec(r.fused),
            r.base_label.token, r.label.token,
        ]))
    return "\n".join(lines) + "\n"


def write_log(log: AnalysisLog, path: str | Path) -> None:
    try:
        Path(path).write_text(format_log(log), encoding="ascii")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def _parse_vec(text: str) -> np.ndarray | None:
    return None if text == "-" else np.array([float(x) for x in text.split(",")])


def _parse_mat(text: str) -> np.ndarray | None:
    return None if text == "-" else np.stack([_parse_vec(row) for row in text.split(";")])


def parse_log(text: str, source: str = "<log>") -> AnalysisLog:
    lines = text.splitlines()
    if not lines or lines[0] != _LOG_MAGIC:
        raise ParseError(f"{source}: not an analysis log")
    head = {}
    i = 1
    while i < len(lines) and lines[i].startswith("# "):
        key, _, value = lines[i][2:].partition(" ")
        head[key] = value
        i += 1
    try:
        if lines[i].split("\t") != list(_COLUMNS):
            raise ParseError(f"{source}: unexpected column header")
        records = []
        for line in lines[i + 1 :]:
            if not line:
                continue
            f = line.split("\t")
            records.append(LeafRecord(
                int(f[0]), int(f[1]), Quality(f[2]), float(f[3]),
                None if f[4] == "-" else float(f[4]), f[5] == "1",
                _parse_mat(f[6]), _parse_vec(f[7]), _parse_vec(f[8]),
                TissueClass.from_token(f[9]), TissueClass.from_token(f[10]),
            ))
        return AnalysisLog(int(head["width"]), int(head["height"]), int(head["depth"]),
                           head["strategy"], float(head["gate"]), records)
    except (KeyError, ValueError, IndexError) as exc:
        raise ParseError(f"{source}: malformed analysis log") from exc


def read_log(path: str | Path) -> AnalysisLog:
    try:
        text = Path(path).read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    return parse_log(text, str(path))


# --------------------------------------------------------------------------
# evaluation


def _metric_lines(prefix: str, m: ClassificationMetrics) -> dict[str, float]:
    return {
        f"{prefix}.accuracy": m.accuracy,
        f"{prefix}.precision": m.precision,
        f"{prefix}.recall": m.recall,
        f"{prefix}.specificity": m.specificity,
    }


def flip_inputs(log: AnalysisLog, gt_grid: np.ndarray) -> tuple[list, list, list]:
    """Base (finest-level) labels, weighted labels and gt over analyzed tumor leaves."""
    base, weighted, gt = [], [], []
    for r in log.records:
        truth = TissueClass(int(gt_grid[r.grid_y, r.grid_x]))
        if r.analyzed and r.fused is not None and truth != TissueClass.NORMAL:
            base.append(r.base_label)
            weighted.append(r.label)
            gt.append(truth)
    return base, weighted, gt


def evaluate_slide(
    logs: AnalysisLog | Sequence[AnalysisLog],
    annotation: AnnotationSet,
    policy: LabelPolicy = LabelPolicy(),
) -> dict[str, float]:
    """Metrics of one or more analyses of the same slide, keyed ``strategy.metric``."""
    if isinstance(logs, AnalysisLog):
        logs = [logs]
    report: dict[str, float] = {}
    gt_grid = None
    for log in logs:
        if (annotation.width, annotation.height) != (log.width, log.height):
            raise ShapeMismatch(
                f"annotation is for a {annotation.width}x{annotation.height} slide, log for {log.width}x{log.height}"
            )
        if gt_grid is None or gt_grid.shape[0] != log.grid_size:
            gt_grid = leaf_label_grid(annotation, log.width, log.height, log.depth, policy)
        pred = log.label_grid()
        p = log.strategy
        rep = iou(pred, gt_grid, ALL_CLASSES)
        report[f"{p}.iou.micro"] = rep.micro
        report[f"{p}.iou.macro"] = rep.macro
        for c in ALL_CLASSES:
            v = rep.per_class[c]
            report[f"{p}.iou.{c.token}"] = float("nan") if v is None else v
        cm = ConfusionMatrix.from_labels(gt_grid.ravel().tolist(), pred.ravel().tolist(), [int(c) for c in ALL_CLASSES])
        report.update(_metric_lines(p, classification_metrics(cm)))
        report[f"{p}.analyzed"] = float(sum(r.analyzed for r in log.records))

        if log.strategy == "weighing_pipeline":
            base, weighted, gt = flip_inputs(log, gt_grid)
            counts = flip_accounting(base, weighted, gt)
            report[f"{p}.flip.correct_flips"] = float(counts.correct_flips)
            report[f"{p}.flip.incorrect_flips"] = float(counts.incorrect_flips)
            report[f"{p}.flip.correct_no_flips"] = float(counts.correct_no_flips)
            report[f"{p}.flip.incorrect_no_flips"] = float(counts.incorrect_no_flips)
            if counts.total:
                report.update(_metric_lines(f"{p}.flip", flip_metrics(counts)))

        gated = [r for r in log.records if r.gate is not None]
        if gated:
            truth = [gt_grid[r.grid_y, r.grid_x] != 0 for r in gated]
            if 0 < sum(truth) < len(truth):
                report[f"{p}.binary.auc"] = roc_auc([r.gate for r in gated], truth).auc
            proposal = np.zeros_like(gt_grid)
            for r in gated:
                proposal[r.grid_y, r.grid_x] = int(r.gate > log.gate)
            rep_b = iou(proposal, (gt_grid != 0).astype(np.int64), [1])
            report[f"{p}.binary.iou"] = float("nan") if rep_b.per_class[1] is None else rep_b.per_class[1]
    return report


def format_report(report: Mapping[str, float]) -> str:
    lines = []
    for key, value in report.items():
        value = float(value)
        lines.append(f"{key}\t{'nan' if math.isnan(value) else repr(value)}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line:
            key, value = line.split("\t")
            out[key] = float(value)
    return out


def write_report(report: Mapping[str, float], path: str | Path) -> None:
    try:
        Path(path).write_text(format_report(report), encoding="ascii")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# training helpers

BINARY_MAP = {TissueClass.NORMAL: "normal", **{c: "tumor" for c in TUMOR_CLASSES}}


def labeled_source(
    slide: SlideImage,
    annotation: AnnotationSet,
    depth: int,
    thresholds: QualityThresholds = QualityThresholds(),
    policy: LabelPolicy = LabelPolicy(),
) -> SlideSource:
    """A slide's pyramid with quality and annotation labels on every quad."""
    pyramid = build_tpyramid(slide, depth)
    assess_pyramid(slide, pyramid, thresholds)
    label_pyramid(pyramid, build_rtree(annotation), policy)
    return SlideSource(slide, pyramid)


def train_binary_expert(sources: Sequence[SlideSource], hyper: ExpertHyper = ExpertHyper(), bins: int = 8) -> FeatureExpert:
    """Normal-vs-tumor expert trained on tissue leaves."""
    leaf = sources[0].pyramid.depth - 1
    params = ProducerParams(BINARY_TOKENS, (leaf,), hyper.batch_size, hyper.seed, label_map=BINARY_MAP)
    return train_feature_expert(BatchGenerator(sources, params), hyper, bins)


def train_multiclass_expert(
    sources: Sequence[SlideSource],
    hyper: ExpertHyper = ExpertHyper(),
    depths: Sequence[int] | None = None,
    bins: int = 8,
) -> FeatureExpert:
    """Level-agnostic tumor-class expert; by default trained on the three finest depths."""
    leaf = sources[0].pyramid.depth - 1
    depths = tuple(range(max(0, leaf - 2), leaf + 1)) if depths is None else tuple(depths)
    batch = hyper.batch_size - hyper.batch_size % len(TUMOR_TOKENS) or len(TUMOR_TOKENS)
    params = ProducerParams(TUMOR_TOKENS, depths, batch, hyper.seed)
    return train_feature_expert(BatchGenerator(sources, params), hyper, bins)


def weigher_dataset(
    sources: Sequence[SlideSource], multiclass, input_size: int, batch: int = 256
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """``(inputs, P, gt)`` for every tissue tumor leaf, in source then row-major order."""
    out = []
    for source in sources:
        pyramid = source.pyramid
        leaves = [q for q in pyramid.leaves if q.quality == Quality.TISSUE and q.label in TUMOR_CLASSES]
        leaves.sort(key=lambda q: (q.grid_y, q.grid_x))
        cache: dict[QuadKey, int] = {}
        patches: list[Patch] = []
        chains = []
        for leaf in leaves:
            chain = pyramid.ancestors(leaf)
            chains.append(chain)
            for q in chain:
                if q.key not in cache:
                    cache[q.key] = len(patches)
                    patches.append(extract_patch(source.slide, q))
        dists = _classify(multiclass, patches, batch)
        onehot = np.eye(len(TUMOR_CLASSES))
        for leaf, chain in zip(leaves, chains):
            stack = PatchStack(tuple(patches[cache[q.key]] for q in chain))
            P = np.stack([dists[cache[q.key]] for q in chain])
            out.append((prepare_stack(stack, input_size), P, onehot[TUMOR_CLASSES.index(leaf.label)]))
    return out
