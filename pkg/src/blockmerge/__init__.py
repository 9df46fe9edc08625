"""Block-wise merging of task-specific checkpoints with Bayesian-optimized recipes."""

__version__ = "0.1.0"
