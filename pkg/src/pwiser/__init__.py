"""Multi-task CTR/CVR training with a pairwise ranking loss on conversion samples."""

__version__ = "0.1.0"
