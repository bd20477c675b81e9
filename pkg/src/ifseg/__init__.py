"""Interactive few-shot segmentation from sparse clicks."""

__version__ = "0.1.0"
