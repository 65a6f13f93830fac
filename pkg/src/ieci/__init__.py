"""Weakly-supervised phrase grounding with deconfounded attention and counterfactual debiasing."""

__version__ = "0.1.0"
