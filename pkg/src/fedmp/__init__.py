"""Deterministic desk-scale federated learning with manifold completion and
prototype alignment, plus geometry diagnostics, byte-exact communication
accounting, and a feature-inversion privacy evaluator."""

from . import config, data, federation, geometry, nn, privacy, protocol  # noqa: F401

__version__ = "0.1.0"
