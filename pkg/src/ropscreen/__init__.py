"""Context-aware two-stream ensemble for retinopathy-of-prematurity screening."""

__version__ = "0.1.0"
