"""Heterogeneous-agent mirror descent policy optimization with exact tabular oracles."""

__version__ = "0.1.0"
