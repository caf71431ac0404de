"""Input-simplification toolkit: density-scored simplification during training,
dataset condensation, and post-hoc classifier audits."""

__version__ = "0.1.0"
