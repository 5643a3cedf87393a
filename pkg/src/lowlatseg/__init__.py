"""Low-latency video segmentation with adaptive feature propagation on a toy domain."""

__version__ = "0.1.0"
