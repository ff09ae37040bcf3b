"""Droplet volatility from time-lapsed inline holograms.

Reconstruct complex fields from lensless holograms, detect and track
sessile droplets, fit their contact-angle decay rate and summarise the
population. A forward simulator renders ground-truth scenes.
"""

__version__ = "0.1.0"

from .errors import HolovolError  # noqa: E402
from .optics import ComplexField, OpticalConfig, propagate_angular_spectrum  # noqa: E402

__all__ = ["ComplexField", "HolovolError", "OpticalConfig", "propagate_angular_spectrum", "__version__"]
