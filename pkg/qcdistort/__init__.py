"""Numerical laboratory for modulus, dimension distortion and quasiconformal constructions."""

__version__ = "0.1.0"
