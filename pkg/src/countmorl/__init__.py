"""Count-based conservative model-based offline RL on tabular MDPs."""

__version__ = "0.1.0"
