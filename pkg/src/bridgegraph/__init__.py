"""Bridge closure impact scoring and typology on a heterogeneous urban graph."""

__version__ = "0.1.0"
