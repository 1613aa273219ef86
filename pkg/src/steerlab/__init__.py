"""steerlab: a Stackelberg decision-transformer laboratory.

Hierarchical autoregressive policies for sequential-move Markov matrix games,
trained with PPO, verified against an exact brute-force equilibrium oracle.
"""

__version__ = "0.1.0"
