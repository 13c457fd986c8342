"""Weakly supervised single-target detection in ultrasound-like scans."""

__version__ = "0.1.0"
