"""Weakly supervised shape detection from image-level labels.

A numpy library implementing the full pipeline: two-stream multiple
instance scoring, cascaded instance refinement, a global positive/negative
prototype bank with momentum updates, similarity-threshold pseudo-label
sampling, and a contrastive embedding objective, trained end to end on a
synthetic shapes benchmark.
"""

__version__ = "0.1.0"
