"""Command-line helpers that drive longer pacdiff studies."""
