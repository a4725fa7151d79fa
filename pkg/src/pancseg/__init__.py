"""Bottom-up pancreas segmentation: SLIC superpixels, patch-level random
forest responses and a two-level superpixel cascade."""

__version__ = "0.1.0"
