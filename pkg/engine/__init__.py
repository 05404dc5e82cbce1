"""The numerical core: autodiff, encoders, training and evaluation."""
from .model import GSNPModel  # noqa: F401
