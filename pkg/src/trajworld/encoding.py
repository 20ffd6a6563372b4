"""Scalarization of trajectories and categorical (de)coding of variates.

A trajectory becomes a T x M grid of scalars, one row per timestep with
layout (state dims..., reward, action dims...). Each variate is then
discretized against per-variate uniform bins: one-hot for targets,
Gaussian histograms for inputs, with expectation/sampling decoders over
bin centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

# Default Gaussian-histogram width as a fraction of the bin width; spreads
# mass over roughly two bins.
DEFAULT_SIGMA_SCALE = 0.75


@dataclass(frozen=True)
class VariateBins:
    """Uniform bin boundaries for a single variate."""

    lo: float
    hi: float
    num_bins: int

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("need at least 2 bins")
        if not self.lo < self.hi:
            raise ValueError(f"degenerate bin range [{self.lo}, {self.hi}]")

    @property
    def width(self):
        return (self.hi - self.lo) / self.num_bins

    @property
    def boundaries(self):
        return np.linspace(self.lo, self.hi, self.num_bins + 1)

    @property
    def centers(self):
        edges = self.boundaries
        return 0.5 * (edges[:-1] + edges[1:])


@dataclass(frozen=True)
class ScalarGrid:
    """T x M scalar view of one trajectory (Eq.-style row layout)."""

    values: np.ndarray  # (T, M)
    m: int
    n: int

    @property
    def num_timesteps(self):
        return self.values.shape[0]

    @property
    def num_variates(self):
        return self.values.shape[1]


def scalarize(record) -> ScalarGrid:
    """Flatten a trajectory record into a T x M grid.

    Row t is (s_t, r_t, a_t); the first reward and the last action have no
    recorded value and are padded with zeros.
    """
    T = record.states.shape[0]
    m = record.states.shape[1]
    n = record.actions.shape[1]
    values = np.zeros((T, m + n + 1), dtype=np.float64)
    values[:, :m] = record.states
    values[1:, m] = record.rewards
    values[:-1, m + 1:] = record.actions
    return ScalarGrid(values=values, m=m, n=n)


def bin_index(x, bins: VariateBins):
    """0-based bin of x: left-open, right-closed, clamped at both ends."""
    idx = np.searchsorted(bins.boundaries, x, side="left")
    return int(np.clip(idx, 1, bins.num_bins)) - 1


def encode_onehot(x, bins: VariateBins):
    out = np.zeros(bins.num_bins)
    out[bin_index(x, bins)] = 1.0
    return out


def encode_gauss_hist(x, bins: VariateBins, sigma):
    """Gaussian-histogram encoding: per-bin mass of N(x, sigma^2),
    renormalized so the vector sums to one (mass outside [lo, hi] is
    redistributed by the renormalization)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    cdf = ndtr((bins.boundaries - x) / sigma)
    mass = np.diff(cdf)
    total = mass.sum()
    if total <= 0.0:
        # x so far out of range that all mass underflows; fall back to the
        # clamped one-hot bin.
        return encode_onehot(x, bins)
    return mass / total


def decode_expectation(p, bins: VariateBins):
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-4:
        raise ValueError(f"probabilities sum to {p.sum():.6f}, not 1")
    return float(p @ bins.centers)


def decode_sample(p, bins: VariateBins, rng):
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-4:
        raise ValueError(f"probabilities sum to {p.sum():.6f}, not 1")
    cum = np.cumsum(p)
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return float(bins.centers[min(idx, bins.num_bins - 1)])


# ---------------------------------------------------------------------------
# vectorized grid encoders (stats = dataset.BinStats over all M variates)


def encode_grid_onehot(values, stats):
    """One-hot encode an (..., M) grid of scalars to (..., M, B)."""
    values = np.asarray(values)
    B = stats.num_bins
    M = values.shape[-1]
    out = np.zeros(values.shape + (B,))
    for j in range(M):
        edges = stats.variate(j).boundaries
        idx = np.clip(np.searchsorted(edges, values[..., j], side="left"), 1, B) - 1
        np.put_along_axis(out[..., j, :], idx[..., None], 1.0, axis=-1)
    return out


def encode_grid_gauss(values, stats, sigma_scale=DEFAULT_SIGMA_SCALE):
    """Gaussian-histogram encode an (..., M) grid to (..., M, B).

    The per-variate sigma is sigma_scale * bin width.
    """
    values = np.asarray(values)
    B = stats.num_bins
    M = values.shape[-1]
    out = np.empty(values.shape + (B,))
    for j in range(M):
        bins = stats.variate(j)
        sigma = sigma_scale * bins.width
        cdf = ndtr((bins.boundaries - values[..., j, None]) / sigma)
        mass = np.diff(cdf, axis=-1)
        total = mass.sum(axis=-1, keepdims=True)
        bad = total[..., 0] <= 0.0
        if np.any(bad):
            onehot = encode_grid_onehot(values[..., j:j + 1], _SingleStats(bins))
            mass[bad] = onehot[bad][..., 0, :]
            total = np.where(total <= 0.0, 1.0, total)
        out[..., j, :] = mass / total
    return out


class _SingleStats:
    """Adapter presenting one VariateBins as an M=1 stats object."""

    def __init__(self, bins):
        self._bins = bins
        self.num_bins = bins.num_bins

    def variate(self, j):
        return self._bins


def decode_grid_expectation(probs, stats):
    """Expected value per variate of an (..., M, B) probability grid."""
    probs = np.asarray(probs)
    M = probs.shape[-2]
    out = np.empty(probs.shape[:-1])
    for j in range(M):
        out[..., j] = probs[..., j, :] @ stats.variate(j).centers
    return out


def decode_grid_sample(probs, stats, rng):
    """Sample a bin center per variate of an (..., M, B) probability grid."""
    probs = np.asarray(probs, dtype=np.float64)
    M = probs.shape[-2]
    B = probs.shape[-1]
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cum[..., -1:]
    idx = np.minimum((cum < u).sum(axis=-1), B - 1)
    out = np.empty(probs.shape[:-1])
    for j in range(M):
        out[..., j] = stats.variate(j).centers[idx[..., j]]
    return out
