"""Finite-particle mean-field optimal control: transport, dynamics, relaxation, superposition."""

__version__ = "0.1.0"
