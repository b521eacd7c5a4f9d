"""mixquant - two-part finite-mixture quantile regression for semi-continuous panels."""

__version__ = "0.3.0"
