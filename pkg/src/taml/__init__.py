"""Style-transfer task augmentation for cross-domain few-shot meta-learning."""

__version__ = "0.1.0"
