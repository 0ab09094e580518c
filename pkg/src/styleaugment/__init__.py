"""In-batch style-transfer augmentation with robustness evaluation."""

__version__ = "0.1.0"
