"""Mesh-free neural solvers for HJB, constrained Fokker-Planck and
mean-field-game equations, with closed-form reference solutions."""

__version__ = "0.1.0"
