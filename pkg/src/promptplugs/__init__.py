"""Gated prompt plugins for multi-aspect controllable sequence generation.

The package trains small encoder-decoder models on a synthetic copy task,
attaches separately trained plugins (prompt, prefix, or gated families) for
individual output constraints, combines them zero-shot by concatenation, and
measures the interference between combined plugins along with lower-bound
estimates for it.
"""

__version__ = "0.1.0"
