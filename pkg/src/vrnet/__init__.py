"""Voigt–Reuss constrained surrogates for 2D biphasic composites.

Submodules
----------
mandel      Mandel-notation tensors, Löwner order, isotropic utilities
bounds      Voigt, Reuss, Hill, Hashin–Shtrikman and Mori–Tanaka references
specnorm    Gap factorisation and the normalised tensor parameterisation
microgen    Cosine-series level-set microstructures and renderers
fftsolver   Periodic FFT-preconditioned homogenisation
netgraph    Reverse-mode autodiff, layers, AdamW and checkpoints
surrogate   The admissible image-to-stiffness network and its training loop
inverse     Multistart inverse design through a frozen surrogate
dataset     Dataset records and generation
cli         Command-line entry point
"""
from .kernels import BACKEND
from .mandel import DEFAULT_PHASES, IsotropicPhase, loewner_leq, plane_strain_stiffness, rel_frobenius

__version__ = "0.1.0"

__all__ = ["BACKEND", "DEFAULT_PHASES", "IsotropicPhase", "loewner_leq",
           "plane_strain_stiffness", "rel_frobenius", "__version__"]
