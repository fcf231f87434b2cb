"""Inference timing for scenepipe."""
