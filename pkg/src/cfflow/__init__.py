"""Coarse-to-fine two-step flow sampler, flow-matching baseline, and desk-scale benchmark harness."""

__version__ = "0.1.0"
