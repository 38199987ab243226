"""Backend-agnostic virtual try-on kernels.

Submodules: geometry (region morphing), spectral (noise fusion), attention
(cross-image operators), pipeline (DDIM workflow against an abstract
denoiser), io (interchange formats), cli (command line, also exposed as the
``vtnk`` script).
"""

from . import attention, errors, geometry, io, pipeline, spectral  # noqa: F401

__version__ = "0.1.0"
