"""Learned path and footstep planning for a bipedal walker, trained against MPC solutions."""

__version__ = "0.1.0"
