"""Cascading-failure blackout risk for DC transmission models."""
