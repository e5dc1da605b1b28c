"""Monte Carlo solvers for infinite-horizon forward-backward SDEs with jumps,
with backward LQ control and two-player game layers."""

from __future__ import annotations

__version__ = "0.1.0"
FORMAT_TAG = "ihfbsde-output/1"
