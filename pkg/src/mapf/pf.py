"""A single bootstrap particle filter with properly weighted resampling.

Weights are kept in log domain. ``log_xi`` is the running unnormalized
weight of each particle; after resampling every particle carries the
filter's current evidence estimate, so the mean of ``exp(log_xi)`` is the
evidence estimate at every point of the recursion. Two evidence
accumulators are maintained: ``log_Zhat`` (log mean of the current weights)
and ``log_Ztilde`` (running sum of log ratios of successive weight sums).
They agree up to round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from mapf import kernels
from mapf.errors import AllWeightsZero, EmptyFilter
from mapf.rng import substream

#: log of the smallest positive normal double; stands in for a zero likelihood
LOG_FLOOR = math.log(np.finfo(np.float64).tiny)

SCHEMES = ("multinomial", "systematic")


class PathRecorder:
    """Stores per-step states and parent indices for ``x_{1:t}`` reconstruction."""

    def __init__(self):
        self.states = []
        self.parents = []
        self._pending = None

    def on_propagate(self, states):
        m = states.shape[0]
        parents = np.arange(m) if self._pending is None else self._pending
        self.states.append(states.copy())
        self.parents.append(parents)
        self._pending = None

    def on_resample(self, idx):
        self._pending = np.asarray(idx, dtype=np.int64)

    def paths(self):
        """Return an ``(M, t, d_x)`` array of surviving trajectories."""
        if not self.states:
            return np.empty((0, 0, 0))
        T = len(self.states)
        cur = np.arange(self.states[-1].shape[0])
        if self._pending is not None:
            cur = self._pending
        out = np.empty((cur.size, T, self.states[-1].shape[1]))
        for t in range(T - 1, -1, -1):
            out[:, t] = self.states[t][cur]
            cur = self.parents[t][cur]
        return out


@dataclass
class FilterState:
    model_id: int
    log_xi: np.ndarray
    states: Optional[np.ndarray] = None
    log_lambda: Optional[np.ndarray] = None
    log_Zhat: float = 0.0
    log_Ztilde: float = 0.0
    resampled_last: bool = False
    t: int = 0
    lost: bool = False
    prev_states: Optional[np.ndarray] = None
    recorder: Optional[PathRecorder] = None

    @property
    def M(self):
        return int(self.log_xi.shape[0])


def init_filter(model_id, M, record_paths=False):
    """A filter with ``M`` particles, unit weights and no states drawn yet."""
    if M < 0:
        raise ValueError("particle count must be non-negative")
    return FilterState(
        model_id=model_id,
        log_xi=np.zeros(M),
        log_lambda=np.zeros(M),
        recorder=PathRecorder() if record_paths else None,
    )


def propagate(fs, model, t, rng):
    """Move every particle one step through the model (or proposal)."""
    if fs.M == 0:
        raise EmptyFilter(f"filter {fs.model_id} has no particles")
    if fs.states is None:
        x = model.initial_sample(fs.M, rng)
        fs.prev_states = None
    elif model.bootstrap:
        x = model.transition_sample(fs.states, t, rng)
    else:
        fs.prev_states = fs.states
        x = model.proposal_sample(fs.states, t, rng)
    fs.states = np.asarray(x, dtype=np.float64).reshape(fs.M, -1)
    fs.t = t
    if fs.recorder is not None:
        fs.recorder.on_propagate(fs.states)
    return fs


def incremental_log_weights(fs, y, model):
    ll = np.asarray(model.likelihood(y, fs.states, fs.t), dtype=np.float64).reshape(-1)
    if not model.bootstrap and fs.prev_states is not None:
        ll = ll + model.transition_density(fs.states, fs.prev_states, fs.t)
        ll = ll - model.proposal_logpdf(fs.states, fs.prev_states, fs.t)
    if np.isnan(ll).any():
        raise ValueError(f"model {model.id} likelihood returned NaN at t={fs.t}")
    return ll


def weight(fs, y, model, floor_on_zero=False):
    """Multiply each ``xi`` by its incremental weight and update both evidence accumulators.

    ``y=None`` means no observation at this tick; weights are left unchanged.
    If every new weight is zero, :class:`AllWeightsZero` is raised unless
    ``floor_on_zero``, in which case the incremental weights are replaced by
    ``LOG_FLOOR`` and the filter is marked lost.
    """
    if fs.M == 0:
        raise EmptyFilter(f"filter {fs.model_id} has no particles")
    if y is None:
        ll = np.zeros(fs.M)
    else:
        ll = incremental_log_weights(fs, y, model)
    new, lse_new, lse_old = kernels.weight_update(fs.log_xi, ll)
    fs.lost = False
    if lse_new == -math.inf:
        if not floor_on_zero:
            raise AllWeightsZero(f"all weights of filter {fs.model_id} are zero at t={fs.t}")
        ll = np.full(fs.M, LOG_FLOOR)
        new, lse_new, lse_old = kernels.weight_update(fs.log_xi, ll)
        fs.lost = True
    fs.log_lambda = ll
    fs.log_xi = new
    fs.log_Zhat = lse_new - math.log(fs.M)
    fs.log_Ztilde += lse_new - lse_old
    fs.resampled_last = False
    return fs


def normalized_weights(fs):
    w, lse = kernels.normalize_log(fs.log_xi)
    if lse == -math.inf:
        raise AllWeightsZero(f"all weights of filter {fs.model_id} are zero")
    return w


def marginal_likelihood(fs):
    """``(log Zhat, log Ztilde)``; equal up to round-off."""
    return fs.log_Zhat, fs.log_Ztilde


def resample_indices(w, n, rng, scheme="multinomial"):
    """Draw ``n`` ancestor indices under normalized weights ``w``."""
    if scheme == "multinomial":
        u = np.sort(rng.random(n))
    elif scheme == "systematic":
        u = (rng.random() + np.arange(n)) / n
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}; use one of {SCHEMES}")
    return kernels.inverse_cdf(w, u)


def resample(fs, M_new, rng, scheme="multinomial"):
    """Draw ``M_new`` particles with replacement and reset their weights to ``Zhat``."""
    if M_new < 1:
        raise ValueError(f"M_new must be >= 1, got {M_new}")
    w = normalized_weights(fs)
    idx = resample_indices(w, M_new, rng, scheme)
    fs.states = fs.states[idx]
    fs.log_lambda = fs.log_lambda[idx]
    fs.log_xi = np.full(M_new, fs.log_Zhat)
    fs.resampled_last = True
    if fs.recorder is not None:
        fs.recorder.on_resample(idx)
    return fs


def local_mmse(fs):
    """Weighted mean of the particle states."""
    return normalized_weights(fs) @ fs.states


def run_filter(model, ys, M, seed, epsilon=0.5, scheme="multinomial", floor_on_zero=True):
    """Run one standalone filter over ``ys`` with ESS-triggered resampling.

    Returns ``(means, log_Zhat, log_Ztilde)`` where the latter two are
    per-step arrays. Step ``t`` draws from the substream ``(seed, 0, 1, t)``.
    """
    fs = init_filter(model.id, M)
    T = len(ys)
    means = np.empty((T, model.state_dim))
    lz = np.empty(T)
    lzt = np.empty(T)
    for t in range(1, T + 1):
        rng = substream(seed, 0, 1, t)
        propagate(fs, model, t, rng)
        weight(fs, ys[t - 1], model, floor_on_zero=floor_on_zero)
        w = normalized_weights(fs)
        means[t - 1] = w @ fs.states
        lz[t - 1], lzt[t - 1] = fs.log_Zhat, fs.log_Ztilde
        if 1.0 / np.sum(w * w) <= epsilon * M:
            resample(fs, M, rng, scheme)
    return means, lz, lzt


__all__ = [
    "LOG_FLOOR",
    "FilterState",
    "PathRecorder",
    "init_filter",
    "propagate",
    "weight",
    "normalized_weights",
    "marginal_likelihood",
    "resample",
    "resample_indices",
    "local_mmse",
    "run_filter",
]
