"""Desk-scale adversarial robustness distillation: dual-teacher transfer
with a contrastive push loss, adaptive loss weighting, cyclic robust-
teacher retraining, a white-/black-box attack suite and an evaluation
harness."""

from . import attacks, data, evaluation, losses, nnkit, training  # noqa: F401

__version__ = "0.1.0"
