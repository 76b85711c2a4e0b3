"""Brain tumor sub-region segmentation and overall-survival prediction."""

__version__ = "0.1.0"
