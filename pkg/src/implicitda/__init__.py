"""Implicit particle filtering with random maps.

Subpackages and modules:

- ``numerics``: dense Cholesky, triangular solves, log-sum-exp, counter-based RNG streams.
- ``sde``, ``lorenz``, ``sks``: discrete-time stochastic models, integrators, observation operators.
- ``posterior``, ``minimize``, ``sampling``: per-particle posterior assembly, Newton
  minimization, and the random-map implicit sampler.
- ``filters``: implicit and SIR filtering loops, resampling, state estimation.
- ``harness``: twin experiments, error statistics, strong-convergence studies.
- ``scenarios``, ``cli``: named experiment presets and the ``da`` command-line tool.
"""

__version__ = "0.1.0"
