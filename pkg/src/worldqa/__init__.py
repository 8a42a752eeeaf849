"""Dual-fidelity embodied environments and a grounded QA data pipeline."""

__version__ = "0.1.0"
