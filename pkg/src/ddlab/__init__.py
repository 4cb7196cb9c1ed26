"""Desk-scale adversarial vision-language lab: robust contrastive pre-training and robust instruction tuning."""

__version__ = "0.1.0"
