"""Disposable transfer learning: gradient-collision unlearning and piggyback readouts."""

__version__ = "0.1.0"
