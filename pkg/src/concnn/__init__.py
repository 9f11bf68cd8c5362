"""Concatenated-CNN rock classification for petrographic thin-section images.

Submodules are imported explicitly (``from concnn import tensor_core``) so
that the command-line entry point can pin BLAS thread settings before numpy
is loaded.
"""

__version__ = "0.1.0"
