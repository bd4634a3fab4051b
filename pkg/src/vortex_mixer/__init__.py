"""Spectral simulator and verification harness for 2D stochastic vorticity dynamics.

The package integrates the vorticity form of the 2D Navier-Stokes equation on
the torus, driven by noise confined to a low-frequency band, together with the
tangent, auxiliary, and remainder processes needed to probe gradient bounds,
coupling contraction, and ergodicity diagnostics at desk scale.
"""

__version__ = "0.1.0"

from .spectral import Lattice, build_lattice

__all__ = ["Lattice", "build_lattice", "__version__"]
