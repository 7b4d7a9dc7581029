"""Desk-scale toolkit for joint visible/thermal adversarial clothing.

Optimizes a two-material (printable fabric vs. aluminum film) clothing
texture against small trainable RGB-T person detectors, evaluates attack
success rates over view angles and distances, and exports a printable
layout.
"""

__version__ = "0.1.0"
