"""Parametric retrieval-augmented generation at desk scale.

Offline, documents are compiled into low-rank FFN weight deltas for a small
frozen decoder-only LM; online, queries retrieve, merge, and plug those
deltas before generating.
"""

__version__ = "0.1.0"
