"""SVD-inspired attention in a toy dense depth regressor, with spectral diagnostics."""

from .attention import AttentionConfig, AttentionRecord, HeadParams, Mechanism
from .model import DepthViT, ModelConfig

__all__ = ["AttentionConfig", "AttentionRecord", "HeadParams", "Mechanism", "DepthViT", "ModelConfig"]
__version__ = "0.1.0"
