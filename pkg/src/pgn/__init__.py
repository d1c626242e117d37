"""Perturbation generation networks: train a generator whose additive
perturbations steer a frozen classifier toward (or away from) correct
predictions."""

__version__ = "0.1.0"
