"""Multi-mix: mixup with K ordered interpolations per pair, and tools to study its gradient variance."""

__version__ = "0.1.0"
