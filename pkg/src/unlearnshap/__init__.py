"""Data valuation by unlearning: Shapley values computed from a pre-trained model."""

__version__ = "0.1.0"
