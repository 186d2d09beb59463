"""Finite-element toolkit for detecting insulating cavities from one boundary trace.

The forward model is a semilinear Neumann problem with a cubic reaction term;
cavities are recovered by minimizing a boundary misfit regularized with a
diffuse-interface (Ginzburg-Landau) approximation of the cavity perimeter.
"""

__version__ = "0.1.0"
