"""Prediction, fitness-feedback and correction networks for heatmap keypoints,
with test-time adaptation driven by a label-free reconstruction error."""

__version__ = "0.1.0"
