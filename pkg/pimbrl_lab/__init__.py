"""PiMBRL Lab - physics-informed model-based reinforcement learning for ODE/PDE control."""

__version__ = "0.1.0"
