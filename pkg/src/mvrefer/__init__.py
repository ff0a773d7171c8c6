"""Desk-scale multi-view referring segmentation: geometry, synthetic scenes, losses,
a numpy toy model with hand-written gradients, and the benchmark harness."""

__version__ = "0.1.0"
