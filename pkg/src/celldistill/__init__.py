"""Annotation-free cell instance segmentation.

Pipeline: seed propagation over self-supervised features with an optimal
transport cleanup, instance-level consistency scoring against a mask
proposal oracle with an adaptive threshold, and recursive self-distillation
of a small two-head pixel classifier from the accepted pseudo-labels.
"""

__version__ = "0.1.0"
