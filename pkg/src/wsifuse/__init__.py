"""Multi-magnification slide analysis with learned level-weight fusion."""

from .classes import TissueClass
from .errors import IoError, ValidationError
from .pipeline import AnalysisResult, ExpertSet, PipelineConfig, analyze_slide, evaluate_slide
from .slide_io import read_annotation, read_slide, write_annotation, write_slide
from .synth import SynthSpec, make_synthetic_slide

__version__ = "0.1.0"

__all__ = [
    "AnalysisResult",
    "ExpertSet",
    "IoError",
    "PipelineConfig",
    "SynthSpec",
    "TissueClass",
    "ValidationError",
    "analyze_slide",
    "evaluate_slide",
    "make_synthetic_slide",
    "read_annotation",
    "read_slide",
    "write_annotation",
    "write_slide",
]
