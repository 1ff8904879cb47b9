"""Monte Carlo laboratory for Brownian loop-soup clusters in 3D.

Samples Brownian paths and loop soups on a logarithmic radius grid,
builds loop clusters at a resolution-linked tolerance, estimates
generalized non-intersection probabilities and their decay exponents,
and scans closed paths for cut-like boxes.
"""

from ._kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
