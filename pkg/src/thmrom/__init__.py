"""Parametric reduced-order modelling of a prestressed concrete wall section."""

__version__ = "0.1.0"
