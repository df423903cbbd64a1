"""Backdoor attacks with physical triggers, and their detection and retrieval."""

__version__ = "0.1.0"
