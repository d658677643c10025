"""Evaluate and diagnose conversational tool-using agents with simulated users and grading notes."""

__version__ = "0.1.0"
