"""Interactive imitation learning for multi-turn agents on synthetic environments.

Teacher-interleaved rollouts (turn-level and prefix mixtures), a unified
weighted-likelihood objective covering SFT / policy gradient / on-policy
distillation / DAgger-style training, exact small-vocabulary softmax policies,
and covariate-shift diagnostics.
"""

__version__ = "0.1.0"
