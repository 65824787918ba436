"""Hybrid retrieval-generation conversation pipeline.

Three stages: retrieve response candidates from a historical
context/response repository with BM25 over contexts, generate one
candidate with a facts-grounded attention seq2seq model, and re-rank
the mixed candidate pool with an interaction-matrix CNN ranker trained
by distant supervision.
"""

__version__ = "0.1.0"
