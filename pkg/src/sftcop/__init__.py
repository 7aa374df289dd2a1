"""Constrained policy transfer with successor features.

Modules: ``core`` (shared types), ``gridworld`` (Four-Room environment),
``sf_learning`` (SF learner with Lagrangian GPI), ``dual`` (multiplier
estimation), ``oracle`` (exact tabular solvers), ``baselines`` (SFQL, PDQL),
``harness`` (experiments), ``plotting`` and ``checks`` (property suites).
"""
__version__ = "0.1.0"
