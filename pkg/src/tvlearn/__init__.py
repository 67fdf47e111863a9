"""Learning spatially varying total-variation denoising weights.

The package solves a bilevel problem: given training pairs of clean and
noisy images, it learns a nonnegative weight field lambda(x) for the
fidelity term of Huber-smoothed TV denoising, so that denoising the
noisy images with that field reproduces the clean ones as well as
possible.  The first-order optimality system of the bilevel problem is
solved by a semismooth Newton method, optionally accelerated by an
overlapping Schwarz domain decomposition with optimized (Robin)
transmission conditions.

Modules
-------
grid      staggered finite-difference calculus on the pixel grid
huber     the C^2 Huber-type smoothing of the TV subgradient
system    the coupled optimality system: residual, Jacobian, state solves
ssn       the semismooth Newton driver
schwarz   overlapping domain decomposition
denoise   plain TV denoising with a given weight field
metrics   SSIM / PSNR / diagnostic norms
data      image and manifest I/O, deterministic noise synthesis
cli       the command-line front end
"""

from .errors import DataFormatError, SolverError

__all__ = ["DataFormatError", "SolverError", "__version__"]

__version__ = "0.1.0"
