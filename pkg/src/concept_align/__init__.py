"""Concept-aligned image-text embeddings: losses, zero-shot inference and
interpretability tools, at a scale that runs on a laptop."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    AlignmentParams,
    ConceptSpan,
    ImageEmbedding,
    TextEmbedding,
    Triplet,
    TripletBatch,
    load_manifest,
    read_ccem,
    write_ccem,
)
from .objectives import it_align_loss, rc_align_loss, total_loss, total_loss_grad  # noqa: E402
from .zeroshot import ClassSpec, annotate_concepts, fuse_predict, retrieve  # noqa: E402

__all__ = [
    "AlignmentParams",
    "ClassSpec",
    "ConceptSpan",
    "ImageEmbedding",
    "TextEmbedding",
    "Triplet",
    "TripletBatch",
    "annotate_concepts",
    "fuse_predict",
    "it_align_loss",
    "load_manifest",
    "rc_align_loss",
    "read_ccem",
    "retrieve",
    "total_loss",
    "total_loss_grad",
    "write_ccem",
]
