"""Joint task training on ListOps and permutation groups with tiny recurrent transformers."""
__version__ = "0.1.0"
