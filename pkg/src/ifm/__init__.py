"""Interleaved subtask planning, keyframe forecasting, and flow-matching
action generation, trained end-to-end on a synthetic block world."""

__version__ = "0.1.0"
