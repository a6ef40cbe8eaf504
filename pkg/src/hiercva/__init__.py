"""Hierarchical simulation for learning counterparty credit valuation adjustments."""
from .market_model import ModelParams, TimeGrid, simulate_market
from .rng import RandomStream

__version__ = "0.1.0"

__all__ = ["ModelParams", "TimeGrid", "simulate_market", "RandomStream", "__version__"]
