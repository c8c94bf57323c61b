"""Pipeline nodes."""
