"""Feature export and proposal serving over the segmentation file protocol."""

__all__ = ["__version__"]
__version__ = "0.1.0"
