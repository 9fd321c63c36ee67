"""Exact and Monte Carlo engine for line ensembles of non-intersecting
random walks above a hard wall with geometric area tilts, plus a
discretized Brownian-polymer oracle for convergence experiments."""

__version__ = "0.1.0"
