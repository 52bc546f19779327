"""Three-stage Bayesian tail regression for extreme spatio-temporal quantiles."""

__version__ = "0.1.0"
