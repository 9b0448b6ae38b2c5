"""Domain-robust 2D multi-class segmentation with mixup and adversarial adaptation."""

__version__ = "0.1.0"
