"""Desk-scale laboratory for noise-robust language-image pre-training.

Synthetic noisy image-text corpora with hidden ground truth, masked-image
and span-masked-text encoders with hand-written gradients, GMM-based
per-pair noise estimation, noise-adaptive contrastive alignment, and
concept-conditioned caption completion, orchestrated as a three-stage
training pipeline with a CLI.
"""

__version__ = "0.1.0"
