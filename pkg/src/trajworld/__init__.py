"""Trajectory world models for heterogeneous control environments.

A desk-scale pipeline: heterogeneous trajectory datasets, categorical
discretization, a two-dimensional (temporal x variate) attention dynamics
model, pre-training/fine-tuning, autoregressive rollout with KV caching,
model-based off-policy evaluation and model predictive control.
"""

__version__ = "0.1.0"
