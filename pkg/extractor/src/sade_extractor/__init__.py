"""Raw-image to SADE embedding extractor with pluggable ViT backbones."""

__version__ = "0.1.0"
