"""Numerical core for simtrain."""
