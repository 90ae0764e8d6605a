"""Multimodal predictive model with language binding, trained by free-energy
minimization, plus goal-directed planning and language inference on a
synthetic tabletop world."""

__version__ = "0.1.0"
