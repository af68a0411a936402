"""Desk-scale engine for variable-length masked discrete diffusion.

Exact posteriors and insertion expectations over small explicit target
distributions, continuous-time Markov chain samplers (tau-leaping and
adaptive any-order inference), a tabular learner for the two prediction
heads, and statistical verification of the governing identities.
"""

from .sequence import MASK

__all__ = ["MASK"]
__version__ = "0.1.0"
