"""
degenkernel: fundamental solutions of degenerate diffusions on (0, ∞)
with absorption at 0.
"""

__version__ = '0.1.0'
