"""Forchheimer flow in heterogeneous porous media and numerical checks of its a priori estimates."""

__version__ = "0.1.0"
