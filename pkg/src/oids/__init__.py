"""Object-identifier scene sequences: synthetic 3D scenes, identifier-token
language modelling, and grounding metrics."""

__version__ = "0.1.0"
