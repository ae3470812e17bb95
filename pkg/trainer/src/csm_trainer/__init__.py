"""Trainer for the contextual-influence scorer.

Consumes the valuation package's corpus and embedding files, trains the
scorer with either supervised regression (frequency-reweighted MSE plus a
contrastive term) or end-to-end generator feedback (sufficiency and
necessity losses through a differentiable soft selection mask), and exports
weights in the `.csmw` interchange format.
"""

__version__ = "0.1.0"
