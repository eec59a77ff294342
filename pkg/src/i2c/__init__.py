"""Trajectory optimization by approximate Bayesian input inference."""
