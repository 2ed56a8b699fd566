"""Subsystem-targeted coverage-guided fuzzing against an instrumented mini-kernel."""

__version__ = "0.1.0"
