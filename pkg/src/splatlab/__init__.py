"""splatlab: CPU differentiable Gaussian-splatting surface reconstruction lab.

Trains anisotropic Gaussian splats on synthetic multi-view scenes with
controlled illumination inconsistency, using an adaptive illumination
adjustment objective plus threshold-gated normal supervision, and evaluates
geometry by Chamfer distance.
"""

__version__ = "0.1.0"

from . import imgcore, illum, normalcomp, synth  # noqa: F401
from .kernels import available_backends, backend_name  # noqa: F401
