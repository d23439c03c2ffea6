"""Figure rendering for markovtyper evaluation CSVs."""

from .render import SchemaError, render

__version__ = "0.1.0"
