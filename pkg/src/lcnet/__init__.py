"""Dynamic interaction networks for lane-change events."""

__version__ = "0.1.0"
