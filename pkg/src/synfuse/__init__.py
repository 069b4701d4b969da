"""Synergy-regularized multimodal fusion and dependence estimation."""
