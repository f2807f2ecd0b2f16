"""Module entry point: python -m sparsim."""

from .cli import entry

entry()
