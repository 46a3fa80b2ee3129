"""Nonlinear valuation with credit, collateral and funding costs."""

__version__ = "0.1.0"
