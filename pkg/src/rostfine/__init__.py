"""Sperm-video grade-distribution assessment pipeline.

Library layout:

- ``tensor``      dense tensors with reverse-mode autodiff
- ``encoder``     patch embedding + divided space-time attention encoder
- ``selection``   attention-score patch selection
- ``branches``    fine-grained spatial/temporal branches and prediction heads
- ``model``       the assembled video model
- ``objectives``  MSE / JS / diversity training losses
- ``trainer``     SGD with momentum, k-fold splits, checkpoints
- ``datapipe``    tracking, clip building, synthetic data, dataset files
- ``metrics``     evaluation metrics and reports
- ``rollout``     attention rollout heatmaps and PGM export
- ``cli``         command-line entry point
"""

from rostfine.tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
