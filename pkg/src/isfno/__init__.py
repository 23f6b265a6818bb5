"""Spectral operator-learning laboratory.

Modules:
  engine      reverse-mode differentiation over real/complex-pair arrays
  solvers     pseudo-spectral reference solvers (MS, KS, KdV, KP)
  datasets    trajectory generation, the ISFN binary format, pair extraction
  models      Fourier-operator model zoo (nine variants) and checkpoints
  training    multi-step relative-L2 training loop (Adam, clipping, schedule)
  evaluation  long-horizon rollouts, error curves, spatial autocorrelation
  ist         inverse scattering transform toolkit for 1d KdV
  cli         command-line pipeline driver
"""

__version__ = "0.1.0"
