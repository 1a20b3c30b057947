"""hivegate: application-aware adaptive message proxy and emulation harness."""

__version__ = "0.1.0"
