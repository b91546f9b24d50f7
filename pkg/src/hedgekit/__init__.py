"""hedgekit: risk/regret measures and progressive hedging on finite scenario spaces."""

__version__ = "0.1.0"
