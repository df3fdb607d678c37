"""Desk-scale Any2Any 3D diffusion for radiotherapy dose prediction on synthetic phantoms."""

__version__ = "0.1.0"
