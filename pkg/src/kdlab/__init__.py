"""Synthetic-oracle distillation laboratory.

Scripted position-indexed teachers, a small transformer student, hard/soft/
hybrid supervision objectives, exact token-level risk sensitivity via
single-override interventions, and exposure-bias decomposition reports.
"""

__version__ = "0.1.0"
