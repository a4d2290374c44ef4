"""Two-phase spatio-temporal transfer learning on toy driving sequences."""

__version__ = "0.1.0"
