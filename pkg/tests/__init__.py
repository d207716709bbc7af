"""Shared test package utilities."""

