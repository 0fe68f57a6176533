"""Numerical services: mixture scores, sampler, editing, metrics, bound checkers."""
