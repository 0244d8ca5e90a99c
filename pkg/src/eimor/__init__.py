"""Early-intervention multimodal classification with mixture-of-rank adapters."""

__version__ = "0.1.0"
