"""Entropic optimal transport toolkit: balancing solvers, inexact oracles,
universal gradient methods, Wasserstein barycenters and transport equilibria."""
