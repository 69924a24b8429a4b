"""Training-patch extraction, scoring and mining for image restoration datasets."""

__version__ = "0.1.0"
SCHEMA_VERSION = "patchforge/1"
