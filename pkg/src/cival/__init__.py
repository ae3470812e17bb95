"""Contextual influence valuation and context selection for RAG pipelines.

The package computes leave-one-out influence values for retrieved contexts
against a pluggable generator, selects contexts with positive influence,
builds imbalance-corrected training corpora for a learned influence scorer,
and evaluates selection strategies (curves, rank correlation, task metrics).
"""

from cival.types import (
    AnswerSet,
    CIVector,
    Context,
    ContextList,
    InvariantError,
    Query,
    Sample,
    SelectionResult,
    validate_sample,
)

__version__ = "0.1.0"

__all__ = [
    "AnswerSet",
    "CIVector",
    "Context",
    "ContextList",
    "InvariantError",
    "Query",
    "Sample",
    "SelectionResult",
    "validate_sample",
    "__version__",
]
