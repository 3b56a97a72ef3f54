"""Utilities package: configuration, logging, threading and file helpers."""
