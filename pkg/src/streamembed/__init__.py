"""Embeddings of variable-sized document-stream samples for author linking,
with ranking (MRR/R@k) and account-linking (EER/minDCF) evaluation harnesses."""

__version__ = "0.1.0"
