"""Desk-scale image copy detection: descriptors, exact kNN retrieval,
three-way candidate aggregation, a concatenated-pair attention matcher and
micro-average precision."""

__version__ = "0.1.0"
