"""Reward-gap minimization for offline RL with imperfect rewards, on tabular MDPs."""
from .divergences import Divergence
from .mdp import TabularMDP
from .solver import SolverConfig, SolverState, solve

__all__ = ["Divergence", "TabularMDP", "SolverConfig", "SolverState", "solve"]
__version__ = "0.1.0"
