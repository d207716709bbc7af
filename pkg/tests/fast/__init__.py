"""Fast test profile."""

