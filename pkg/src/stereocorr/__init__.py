"""Stereo distance estimation with learned position correction and gated iterative refinement."""

__version__ = "0.1.0"
