"""Rollout governance toolkit.

Gates staged feature rollouts behind a dependency lattice, invariant
rules, a safety envelope with a risk-budget ledger, and causal
measurement, and ships a discrete-time simulator for comparing naive
and governed rollout policies on a synthetic fintech population.
"""

__version__ = "0.1.0"
