"""Desk-scale reflector-array simulator and hierarchical multi-agent RL trainer.

A deterministic geometric-optics channel engine for mechanically steered
tile reflectors, plus a two-tier PPO system: a discrete user-to-segment
allocator with a geometric prior and continuous focal-point agents.
"""

__version__ = "0.1.0"
