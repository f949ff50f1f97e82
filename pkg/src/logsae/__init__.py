"""Empirical best prediction under a log-transformed nested-error model."""
