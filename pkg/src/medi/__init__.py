"""Micro-expression dynamic images: temporal-ranked and motion-intensity
representations, an adaptive fusion network trained from scratch, and a
leave-one-subject-out evaluation harness."""

__version__ = "0.1.0"
