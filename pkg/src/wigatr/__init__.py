"""E(3)-equivariant geometric-algebra surrogates for indoor radio propagation."""

__version__ = "0.1.0"
