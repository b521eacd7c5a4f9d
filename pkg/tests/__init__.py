"""Tests for mixquant."""
