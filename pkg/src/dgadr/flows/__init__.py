"""Command flows wiring the pipeline nodes together."""
