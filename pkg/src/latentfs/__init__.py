"""Feature selection by policy-guided search in a permutation-invariant subset embedding space."""

__version__ = "0.1.0"
