"""Conformational search over discretized torsion angles with QUBO-based variable neighbourhood descent."""

__version__ = "0.1.0"
