"""Heterogeneous treatment effects with propensity matching, honest causal trees and forests."""

__version__ = "0.1.0"
