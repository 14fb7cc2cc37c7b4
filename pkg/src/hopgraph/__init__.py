"""Multihop graph attention over scene graphs, masked node pretraining and weak graph supervision."""
__version__ = "0.1.0"
