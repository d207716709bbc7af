"""Slow test profile."""

