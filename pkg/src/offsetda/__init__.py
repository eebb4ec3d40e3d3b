"""Desk-scale domain-adaptive anchor-free detection lab.

Self-contained stack: a float64 reverse-mode autodiff core, a synthetic
two-domain scene generator, a small multi-level anchor-free detector,
offset-conditioned adversarial feature alignment, EMA-teacher
self-training, and SVD-based feature-space analysis.
"""

__version__ = "0.1.0"
