"""Training-free, class-agnostic anomaly segmentation.

Prototype memory banks are built from multi-layer backbone embeddings of
anomaly-free images; test images are scored by fused nearest-neighbor
distance maps over an overlapping patch grid, binarized at a threshold
self-calibrated from held-out normal data, and refined with multi-oriented
morphological closing.  The pixel-level evaluation harness is included.
"""

__version__ = "0.1.0"
