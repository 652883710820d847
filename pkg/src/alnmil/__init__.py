"""Attention MIL for lymph-node metastasis prediction from slide tiles."""
