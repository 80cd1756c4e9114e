"""Helical vortex patches: anisotropic Green's functions, energy maximizers and their dynamics."""

__version__ = "0.1.0"

from .errors import HelipatchError  # noqa: F401
from .helical_coeff import HelixParams  # noqa: F401
