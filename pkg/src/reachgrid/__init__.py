"""Reachability summaries and embeddings from GPS trajectories on the zoom-24 tile grid."""

__version__ = "0.1.0"
