"""Multimodal negative learning for late-fusion classifiers, with margin-based
robustness certificates."""

from mnl.numerics import RngStream, cross_entropy, kl_divergence, log_softmax, softmax

__version__ = "0.1.0"

__all__ = [
    "RngStream",
    "cross_entropy",
    "kl_divergence",
    "log_softmax",
    "softmax",
]
