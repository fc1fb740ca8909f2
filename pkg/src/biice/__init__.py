"""Concept binding / broadcast classifier head over patch embeddings, with training and analysis tools."""
from .model import (
    BiIceConfig,
    BiIceParams,
    ForwardTrace,
    broadcast,
    compute_logits,
    concept_binding,
    decomposed_logits,
    forward,
    refine_concepts,
    split_composition,
)
from .objectives import AnnotationSet, LossWeights
from .training import TrainConfig, fit

__all__ = [
    "AnnotationSet",
    "BiIceConfig",
    "BiIceParams",
    "ForwardTrace",
    "LossWeights",
    "TrainConfig",
    "broadcast",
    "compute_logits",
    "concept_binding",
    "decomposed_logits",
    "fit",
    "forward",
    "refine_concepts",
    "split_composition",
]
