"""Feasibility regions of constrained optimal control: models, constraints, solvers and region maps."""

__version__ = "0.1.0"
