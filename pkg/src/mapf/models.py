"""Candidate state-space models, banks of them, and true-model schedules.

All model procedures are vectorized over particles: states are arrays of
shape ``(M, d_x)`` and likelihoods return shape ``(M,)`` log-densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from mapf.errors import (
    ConfigError,
    DimensionMismatch,
    EmptyBank,
    NonNormalizedPrior,
    ScheduleError,
)

PRIOR_TOL = 1e-12


def _standard_normal_init(dim):
    def init(m, rng):
        return rng.standard_normal((m, dim))

    return init


@dataclass
class ModelSpec:
    """One candidate model: transition sampler, likelihood and prior mass.

    ``transition_sample(x, t, rng)`` maps ``(M, d)`` states at ``t - 1`` to
    ``(M, d)`` states at ``t``. ``likelihood(y, x, t)`` returns ``(M,)`` log
    densities, finite or ``-inf``. ``initial_sample(m, rng)`` draws ``x_1``
    and defaults to a standard normal per dimension.

    ``observation_sample(x, t, rng)`` is only needed when the model is used
    as a data generator. ``transition_density`` and the ``proposal_*``
    hooks are only needed for non-bootstrap proposals.
    """

    transition_sample: Callable
    likelihood: Callable
    state_dim: int = 1
    obs_dim: int = 1
    id: int = 1
    prior_mass: float = 1.0
    initial_sample: Optional[Callable] = None
    observation_sample: Optional[Callable] = None
    transition_density: Optional[Callable] = None
    proposal_sample: Optional[Callable] = None
    proposal_logpdf: Optional[Callable] = None
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.initial_sample is None:
            self.initial_sample = _standard_normal_init(self.state_dim)
        if (self.proposal_sample is None) != (self.proposal_logpdf is None):
            raise ConfigError("proposal_sample and proposal_logpdf must be given together")
        if self.proposal_sample is not None and self.transition_density is None:
            raise ConfigError("a custom proposal requires transition_density")

    @property
    def bootstrap(self):
        return self.proposal_sample is None


@dataclass
class ModelBank:
    models: list
    state_dim: int = 1
    obs_dim: int = 1

    @property
    def K(self):
        return len(self.models)

    @property
    def log_priors(self):
        with np.errstate(divide="ignore"):
            return np.log(np.array([m.prior_mass for m in self.models], dtype=np.float64))

    @classmethod
    def from_models(cls, models, priors=None):
        """Build a bank, renumbering ids 1..K and setting priors (uniform by default)."""
        models = list(models)
        if not models:
            raise EmptyBank("bank has no models")
        K = len(models)
        if priors is None:
            priors = [1.0 / K] * K
        if len(priors) != K:
            raise ConfigError(f"{len(priors)} priors for {K} models")
        for k, (m, p) in enumerate(zip(models, priors), start=1):
            m.id = k
            m.prior_mass = float(p)
        return cls(models, models[0].state_dim, models[0].obs_dim)


def validate_bank(bank):
    """Raise a :class:`~mapf.errors.BankError` subclass if ``bank`` is malformed."""
    if bank.K == 0:
        raise EmptyBank("bank has no models")
    priors = np.array([m.prior_mass for m in bank.models], dtype=np.float64)
    if np.any(priors < 0) or np.any(priors > 1) or not np.all(np.isfinite(priors)):
        raise NonNormalizedPrior(f"prior masses must lie in [0, 1], got {priors.tolist()}")
    if abs(math.fsum(priors) - 1.0) > PRIOR_TOL:
        raise NonNormalizedPrior(f"prior masses sum to {math.fsum(priors)!r}, not 1")
    for m in bank.models:
        if m.state_dim != bank.state_dim:
            raise DimensionMismatch(f"model {m.id} has d_x={m.state_dim}, bank has {bank.state_dim}")
        if m.obs_dim != bank.obs_dim:
            raise DimensionMismatch(f"model {m.id} has d_y={m.obs_dim}, bank has {bank.obs_dim}")
    return True


@dataclass
class TrueModelSchedule:
    """Piecewise-constant true model: ``segments`` is a list of ``(start, ModelSpec)``.

    ``labels`` optionally gives, per segment, the 1-based bank index of the
    candidate that coincides with that generator (used for match metrics).
    """

    segments: list
    labels: Optional[list] = None

    def __post_init__(self):
        if not self.segments:
            raise ScheduleError("schedule has no segments")
        starts = [s for s, _ in self.segments]
        if starts[0] != 1:
            raise ScheduleError(f"first segment must start at t=1, got {starts[0]}")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ScheduleError(f"segment starts must be strictly increasing: {starts}")
        if self.labels is not None and len(self.labels) != len(self.segments):
            raise ScheduleError("labels must match segments one-to-one")

    def segment_index(self, t):
        i = 0
        for j, (s, _) in enumerate(self.segments):
            if s <= t:
                i = j
        return i

    def generator(self, t):
        return self.segments[self.segment_index(t)][1]

    def true_labels(self, T):
        if self.labels is None:
            return None
        return np.array([self.labels[self.segment_index(t)] for t in range(1, T + 1)])


def simulate_truth(schedule, T, rng, x_prev=None, t0=1):
    """Simulate ``x_{t0:t0+T-1}`` and ``y`` from the schedule.

    Draw order is ``x_t`` then ``y_t`` for each ``t`` from a single ``rng``,
    so simulating ``[1, s)`` and continuing from the returned last state with
    ``t0=s`` reproduces one full simulation.
    """
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    xs, ys = [], []
    x = None if x_prev is None else np.asarray(x_prev, dtype=np.float64).reshape(1, -1)
    for t in range(t0, t0 + T):
        g = schedule.generator(t)
        if g.observation_sample is None:
            raise ConfigError(f"model family {g.family!r} cannot generate observations")
        if x is None:
            x = np.asarray(g.initial_sample(1, rng), dtype=np.float64).reshape(1, -1)
        else:
            x = np.asarray(g.transition_sample(x, t, rng), dtype=np.float64).reshape(1, -1)
        y = np.asarray(g.observation_sample(x, t, rng), dtype=np.float64).reshape(1, -1)
        xs.append(x[0])
        ys.append(y[0])
    return np.array(xs), np.array(ys)


# -- family registry -------------------------------------------------------

FAMILIES: dict[str, Callable[..., ModelSpec]] = {}


def register_family(name):
    def deco(fn):
        FAMILIES[name] = fn
        return fn

    return deco


def build_model(decl: dict[str, Any], base_dir=None) -> ModelSpec:
    """Build a :class:`ModelSpec` from ``{"family": name, "params": {...}}``."""
    if not isinstance(decl, dict) or "family" not in decl:
        raise ConfigError(f"model declaration needs a 'family' key: {decl!r}")
    name = decl["family"]
    if name not in FAMILIES:
        raise ConfigError(f"unknown model family {name!r}; known: {sorted(FAMILIES)}")
    params = dict(decl.get("params", {}))
    if base_dir is not None:
        params.setdefault("_base_dir", base_dir)
    try:
        return FAMILIES[name](**params)
    except TypeError as e:
        raise ConfigError(f"bad parameters for family {name!r}: {e}") from e


def switching_model(schedule_models):
    """Compose ``[(start, ModelSpec), ...]`` into one time-varying model.

    Used for the "true-model" and "wrong-model" single-filter baselines.
    """
    sched = TrueModelSchedule(list(schedule_models))

    def transition(x, t, rng):
        return sched.generator(t).transition_sample(x, t, rng)

    def likelihood(y, x, t):
        return sched.generator(t).likelihood(y, x, t)

    def observe(x, t, rng):
        return sched.generator(t).observation_sample(x, t, rng)

    first = sched.segments[0][1]
    return ModelSpec(
        transition_sample=transition,
        likelihood=likelihood,
        state_dim=first.state_dim,
        obs_dim=first.obs_dim,
        initial_sample=first.initial_sample,
        observation_sample=observe,
        family="switching",
    )
