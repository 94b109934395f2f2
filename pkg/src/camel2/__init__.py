"""Top-t% instance selection for weakly supervised multiple-instance learning."""

__version__ = "0.1.0"
