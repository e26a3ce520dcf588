"""k-beta text augmentation with masked-LM regularisation for low-resource classification."""

__version__ = "0.1.0"
