"""Command line and figure export."""
