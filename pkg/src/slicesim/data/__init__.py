"""Packaged link-abstraction data tables (see CHECKSUMS for pins)."""
