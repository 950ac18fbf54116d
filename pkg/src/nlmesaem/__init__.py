"""Stochastic EM for nonlinear mixed-effects models."""
