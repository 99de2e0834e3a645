"""Deterministic-policy-gradient toolkit: from-scratch DDPG plus ensemble
action selection, with desk-scale continuous-control environments."""

__version__ = "0.1.0"
