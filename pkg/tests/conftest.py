"""Shared fixtures and oracles for the test suite."""

import numpy as np
import pytest

from trajworld import dataset, model
from trajworld import tensor_core as tc


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_model_cfg(**overrides):
    """A model small enough for finite-difference checks."""
    base = dict(num_blocks=2, num_heads=2, hidden=8, ffn_hidden=(16, 8),
                context=6, num_bins=5, max_variates=12, dropout=0.0)
    base.update(overrides)
    return model.ModelConfig(**base)


def unit_stats(num_variates, num_bins=5, lo=-1.0, hi=1.0):
    return dataset.BinStats(lo=np.full(num_variates, lo),
                            hi=np.full(num_variates, hi), num_bins=num_bins)


def grad_check_param(loss_fn, tensor, eps=1e-4):
    """Max relative error between tape gradient and central differences.

    ``loss_fn`` must recompute the loss from the tensor's current data.
    """
    with tc.GradTape() as tape:
        tape.backward(loss_fn())
    analytic = tensor.grad.copy()
    tensor.grad = None

    def f(x):
        tensor.data = np.asarray(x.data if isinstance(x, tc.Tensor) else x)
        return loss_fn().item()

    numeric = tc.finite_diff_gradient(f, tensor.data, eps=eps).data
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))
