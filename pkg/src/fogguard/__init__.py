"""Failure-resilient distributed DNN inference over edge, fog and cloud nodes."""
__version__ = "0.1.0"
