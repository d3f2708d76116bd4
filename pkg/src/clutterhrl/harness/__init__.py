"""Evaluation, rendering and the command-line entry point."""
