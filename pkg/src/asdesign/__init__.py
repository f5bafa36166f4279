"""Adaptive supergeo design for geo experiments.

Graph embeddings of geos feed Ward clustering, whose dendrogram cuts are
candidate supergeo partitions; a balance-optimising solver then picks a
partition and a two-arm split, and trimmed match estimates the iROAS.
"""
__version__ = "0.1.0"
