"""Federated adaptation of frozen embedding features.

Trains a small per-client mask network over frozen image embeddings with a
contrastive image-text objective plus an adversarial domain-alignment
objective, aggregates the mask networks by parameter averaging, and
evaluates with accuracy, balanced accuracy, macro-F1, ROC-AUC, calibration
and decision-curve analysis.
"""

from fedadapt.kernels import kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
