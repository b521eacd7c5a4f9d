"""Bundled demo panel, run configuration and parameter file."""
