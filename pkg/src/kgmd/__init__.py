"""Multiscale-decomposition collocation solver for the nonlinear Klein-Gordon
equation over the full relativistic-to-nonrelativistic range, with a Fourier
pseudospectral reference solver as ground-truth oracle."""

from ._malloc import limit_blas_threads, raise_malloc_thresholds

raise_malloc_thresholds()
limit_blas_threads()

__version__ = "0.1.0"
