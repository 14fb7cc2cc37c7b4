"""Synthetic data, experiments and the command-line front end."""
