"""Hybrid physics/neural-network variational data assimilation at desk scale.

Modules: ``sphere`` (grids and spectral transforms), ``net`` (column
network), ``dyn`` (Lorenz-96 truth, forecast and hybrid models), ``assim``
(4D-Var and cycling), ``dataset`` (offline increment datasets), ``diag``
(scores, spectra, scorecards) and ``cli``.
"""

__version__ = "0.1.0"
