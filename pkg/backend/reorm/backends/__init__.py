"""Model backends: abstract interfaces, HTTP clients and record/replay."""

from reorm.backends.base import (
    BackendSet,
    Embedder,
    PairScorer,
    Reasoner,
    Remover,
    Segmenter,
    SegmentInstance,
    SegmentResult,
)

__all__ = [
    "BackendSet",
    "Embedder",
    "PairScorer",
    "Reasoner",
    "Remover",
    "Segmenter",
    "SegmentInstance",
    "SegmentResult",
]
