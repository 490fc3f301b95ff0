"""Adversarial test-time training with a re-usable mask discriminator."""

__version__ = "0.1.0"
