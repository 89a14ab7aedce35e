"""Multi-exit neural networks at desk scale."""
__version__ = "0.1.0"
