"""Incremental point-cloud place recognition with structure-aware distillation."""

__version__ = "0.1.0"
