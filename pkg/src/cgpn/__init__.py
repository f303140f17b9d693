"""Coarse-grained part-level re-identification network and its harness."""

__version__ = "0.1.0"
