"""Themagator: LLM-assisted thematic analysis of social media posts."""

__version__ = "0.3.0"
