"""Desk-scale offline RL lab for the SelfBC family of policy-constraint methods."""

__version__ = "0.1.0"
