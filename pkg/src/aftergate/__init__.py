"""Monte Carlo simulation of the after-gate faked-state attack on a gated-detector QKD receiver."""

import os

# the TBB runtime shipped in some environments is too old for numba; OpenMP is always present
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
