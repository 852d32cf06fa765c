"""Reversible high-order ALF/Yoshida integrators with exact adjoint gradients."""

__version__ = "0.1.0"
