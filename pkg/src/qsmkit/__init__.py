"""Desk-scale QSM dipole-inversion toolkit.

Subpackages: ``tensor`` (autodiff engine), ``dipole`` (forward physics,
TKD baseline, synthesis), ``ir2unet`` (the iterated recurrent U-net),
``training``, ``metrics``, ``fileio``, and ``cli``.
"""

__version__ = "0.1.0"
