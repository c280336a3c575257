"""Torch modules and numerics: selective scans, the vision backbone, the report decoder."""
