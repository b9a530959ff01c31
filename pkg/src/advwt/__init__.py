"""Adversarial wear-and-tear: latent damage search against image classifiers."""

__version__ = "0.1.0"
