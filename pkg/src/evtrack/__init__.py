"""Desk-scale embodied visual tracking: simulator, anchor-diffusion planner,
and benchmark harness."""

__version__ = "0.1.0"
