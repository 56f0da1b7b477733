"""Cooperative layer: K parallel filters sharing a fixed particle budget.

One iteration of :func:`step`:

1. propagate every filter through its own model;
2. weight every filter against the observation;
3. fuse: model posteriors ``rho_bar``, count-weighted ``rho_tilde``, global
   weights ``gamma = w_bar * rho_tilde`` and the global ESS;
4. if a refresh is due, run it; otherwise, if the ESS falls to
   ``epsilon * N``, either reallocate the budget and resample inside each
   filter, or (adaptive refreshing) refresh with probability ``p_r``;
5. report.

Steps 1-2 are independent across filters and may run on an executor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from mapf import kernels, pf
from mapf.errors import ConfigError, InfeasibleFloor
from mapf.models import validate_bank
from mapf.rng import FUSION, substream

ESS_VARIANTS = ("perplexity", "max-weight")
POLICIES = ("largest-remainder", "proportional-random")


@dataclass
class MapfConfig:
    epsilon: float = 0.1
    ess_variant: str = "perplexity"
    allocation_policy: str = "largest-remainder"
    M_min: int = 2
    refresh_period: Optional[int] = None
    refresh_prob: float = 0.1
    adaptive_refresh: bool = False
    forced_refresh_times: tuple = ()
    global_resampling: bool = False
    resampling_scheme: str = "multinomial"
    record_paths: bool = False

    def validate(self, N=None, K=None):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.ess_variant not in ESS_VARIANTS:
            raise ConfigError(f"ess_variant must be one of {ESS_VARIANTS}")
        if self.allocation_policy not in POLICIES:
            raise ConfigError(f"allocation_policy must be one of {POLICIES}")
        if self.resampling_scheme not in pf.SCHEMES:
            raise ConfigError(f"resampling_scheme must be one of {pf.SCHEMES}")
        if self.refresh_period is not None and self.refresh_period < 1:
            raise ConfigError("refresh_period (T_V) must be >= 1 when set")
        if not 0.0 <= self.refresh_prob <= 1.0:
            raise ConfigError("refresh_prob (p_r) must lie in [0, 1]")
        if self.M_min < 0:
            raise ConfigError("M_min must be non-negative")
        if not self.global_resampling and self.M_min < 2:
            raise ConfigError("per-filter resampling needs M_min >= 2")
        if N is not None and K is not None:
            if self.M_min * K > N:
                raise ConfigError(f"M_min*K = {self.M_min * K} exceeds N = {N}")
            if not self.global_resampling and N // K < 2:
                raise ConfigError("each filter needs at least 2 particles at start (N/K >= 2)")
        return self


@dataclass
class StepReport:
    """Outputs of one iteration.

    ``M`` holds the per-filter particle counts carried into the next
    iteration. ``rho_bar``/``rho_tilde`` and the estimates are those of the
    fusion step, before any refresh resets the accumulators.
    """

    t: int
    global_estimate: np.ndarray
    local_estimates: np.ndarray
    rho_bar: np.ndarray
    rho_tilde: np.ndarray
    M: np.ndarray
    ess: float
    resampled: bool
    refreshed: bool
    map_model: int
    lost: np.ndarray


@dataclass
class MapfState:
    filters: list
    bank: object
    N: int
    config: MapfConfig
    seed: int = 0
    run: int = 0
    t: int = 0
    rho_bar: Optional[np.ndarray] = None
    rho_tilde: Optional[np.ndarray] = None
    executor: object = field(default=None, repr=False)

    @property
    def counts(self):
        return np.array([fs.M for fs in self.filters], dtype=np.int64)


def even_split(N, K):
    """``N // K`` per filter with the remainder going to the lowest indices."""
    m = np.full(K, N // K, dtype=np.int64)
    m[: N - m.sum()] += 1
    return m


def init_state(bank, N, config=None, seed=0, run=0, executor=None):
    config = (config or MapfConfig()).validate(N, bank.K)
    validate_bank(bank)
    filters = [
        pf.init_filter(m.id, int(c), record_paths=config.record_paths)
        for m, c in zip(bank.models, even_split(N, bank.K))
    ]
    K = bank.K
    return MapfState(
        filters=filters,
        bank=bank,
        N=int(N),
        config=config,
        seed=seed,
        run=run,
        rho_bar=np.full(K, 1.0 / K),
        rho_tilde=np.full(K, 1.0 / K),
        executor=executor,
    )


# -- fusion ----------------------------------------------------------------


def _log_priors(bank_or_logp):
    if hasattr(bank_or_logp, "log_priors"):
        return bank_or_logp.log_priors
    return np.asarray(bank_or_logp, dtype=np.float64)


def model_posteriors(bank, log_Z):
    """``rho_bar_k`` proportional to ``Zhat_k p(M_k)``, computed in log domain.

    ``bank`` may also be a vector of log prior masses.
    """
    a = np.asarray(log_Z, dtype=np.float64) + _log_priors(bank)
    w, lse = kernels.normalize_log(a)
    if lse == -math.inf:
        raise FloatingPointError("every model has zero evidence or zero prior")
    return w


def empirical_posteriors(bank, log_Z, M):
    """``rho_tilde_k`` proportional to ``Zhat_k M_k p(M_k)``."""
    with np.errstate(divide="ignore"):
        logM = np.log(np.asarray(M, dtype=np.float64))
    return model_posteriors(bank, np.asarray(log_Z, dtype=np.float64) + logM)


def global_weights(filters, rho_tilde):
    """Per-filter arrays of ``gamma = w_bar * rho_tilde``; empty filters give empty arrays."""
    out = []
    for fs, r in zip(filters, rho_tilde):
        if fs.M == 0:
            out.append(np.empty(0))
        else:
            out.append(pf.normalized_weights(fs) * r)
    return out


def global_ess(gamma, variant="perplexity"):
    g = np.concatenate([np.ravel(x) for x in gamma]) if isinstance(gamma, list) else np.ravel(gamma)
    if variant == "perplexity":
        return float(1.0 / np.dot(g, g))
    if variant == "max-weight":
        return float(1.0 / g.max())
    raise ValueError(f"unknown ESS variant {variant!r}")


def allocate(N, rho_bar, policy="largest-remainder", M_min=2, rng=None):
    """Split the budget ``N`` across filters in proportion to ``rho_bar``.

    Each filter first gets ``max(M_min, floor(N rho_k))``. If the floor
    pushes the total over ``N``, the excess is taken one particle at a time
    from the filter with the largest surplus over its share ``N rho_k``
    among those above ``M_min``. The remaining particles are then handed
    out by largest deficit (``largest-remainder``) or by independent draws
    from ``rho_bar`` (``proportional-random``). Ties go to the lowest index.
    """
    rho = np.asarray(rho_bar, dtype=np.float64)
    K = rho.size
    if M_min * K > N:
        raise InfeasibleFloor(f"M_min*K = {M_min * K} exceeds N = {N}")
    share = N * rho
    M = np.maximum(M_min, np.floor(share)).astype(np.int64)
    while M.sum() > N:
        surplus = np.where(M > M_min, M - share, -np.inf)
        M[int(np.argmax(surplus))] -= 1
    left = N - int(M.sum())
    if left > 0:
        if policy == "largest-remainder":
            deficit = share - M
            # stable sort on the negated deficit gives index order on ties
            order = np.argsort(-deficit, kind="stable")
            for i in range(left):
                M[order[i % K]] += 1
        elif policy == "proportional-random":
            if rng is None:
                raise ValueError("proportional-random allocation needs an rng")
            M += rng.multinomial(left, rho / rho.sum())
        else:
            raise ValueError(f"unknown allocation policy {policy!r}")
    return M


def global_mmse(rho, local):
    """Convex combination of per-filter estimates; zero-weight rows are ignored."""
    rho = np.asarray(rho, dtype=np.float64)
    local = np.asarray(local, dtype=np.float64)
    keep = rho > 0
    return rho[keep] @ local[keep]


def map_model(rho_bar):
    """1-based index of the most probable model, lowest index on ties."""
    return int(np.argmax(rho_bar)) + 1


# -- resampling across filters ----------------------------------------------


def _set_particles(fs, states, log_xi):
    fs.states = states
    fs.log_xi = log_xi
    fs.log_lambda = np.zeros(states.shape[0])
    fs.resampled_last = True
    if fs.recorder is not None:
        fs.recorder = pf.PathRecorder()


def refresh(state, rng):
    """Reset evidence windows and re-partition the budget evenly.

    The evidence of every filter is recomputed from the current incremental
    weights alone. N particles are then drawn from the global mixture under
    ``gamma = w_bar * rho_tilde`` of those refreshed quantities and dealt
    round-robin, so each filter receives ``N // K`` or ``N // K + 1`` of
    them regardless of origin. All weights restart at one.
    """
    cfg = state.config
    K = state.bank.K
    log_Z = np.full(K, -math.inf)
    wbar = []
    for k, fs in enumerate(state.filters):
        if fs.M == 0:
            wbar.append(np.empty(0))
            continue
        w, lse = kernels.normalize_log(fs.log_lambda)
        log_Z[k] = lse - math.log(fs.M)
        wbar.append(w)
    rho_bar = model_posteriors(state.bank, log_Z)
    rho_tilde = empirical_posteriors(state.bank, log_Z, state.counts)
    gamma = np.concatenate([w * r for w, r in zip(wbar, rho_tilde)])
    pool = np.concatenate([fs.states for fs in state.filters if fs.M > 0])
    idx = pf.resample_indices(gamma, state.N, rng, cfg.resampling_scheme)
    for k, fs in enumerate(state.filters):
        mine = idx[k::K]
        _set_particles(fs, pool[mine], np.zeros(mine.size))
        fs.log_Zhat = 0.0
        fs.log_Ztilde = 0.0
        fs.lost = False
    state.rho_bar = rho_bar
    state.rho_tilde = rho_tilde
    return state


def global_resample(state, rng):
    """Two-level resampling: pick a model by ``rho_bar``, then a particle within it.

    ``M_k`` becomes the number of times model ``k`` was picked and may be
    zero; such a filter is dormant until the next refresh.
    """
    cfg = state.config
    rho = state.rho_bar
    picks = pf.resample_indices(rho, state.N, rng, cfg.resampling_scheme)
    counts = np.bincount(picks, minlength=state.bank.K)
    for fs, c in zip(state.filters, counts):
        if c > 0:
            pf.resample(fs, int(c), rng, cfg.resampling_scheme)
        elif fs.M > 0:
            d = fs.states.shape[1]
            _set_particles(fs, np.empty((0, d)), np.empty(0))
            fs.log_Zhat = -math.inf
    return state


def _refresh_due(cfg, t):
    if cfg.refresh_period is not None and t % cfg.refresh_period == 0:
        return True
    return t in cfg.forced_refresh_times


def _advance(args):
    fs, model, t, y, rng = args
    if fs.M > 0:
        pf.propagate(fs, model, t, rng)
        pf.weight(fs, y, model, floor_on_zero=True)
    return fs


def step(state, y):
    """Run one full iteration on observation ``y`` (``None`` for a missing reading)."""
    cfg = state.config
    t = state.t + 1
    K = state.bank.K
    rngs = [substream(state.seed, state.run, k + 1, t) for k in range(K)]
    jobs = [(fs, m, t, y, r) for fs, m, r in zip(state.filters, state.bank.models, rngs)]
    if state.executor is not None:
        # results replace the inputs so process pools work as well as threads
        state.filters = list(state.executor.map(_advance, jobs))
    else:
        for j in jobs:
            _advance(j)
    state.t = t

    counts = state.counts
    log_Z = np.array([fs.log_Zhat if fs.M > 0 else -math.inf for fs in state.filters])
    rho_bar = model_posteriors(state.bank, log_Z)
    rho_tilde = empirical_posteriors(state.bank, log_Z, counts)
    state.rho_bar, state.rho_tilde = rho_bar, rho_tilde
    d = state.bank.state_dim
    local = np.full((K, d), np.nan)
    for k, fs in enumerate(state.filters):
        if fs.M > 0:
            local[k] = pf.local_mmse(fs)
    estimate = global_mmse(rho_bar, local)
    ess = global_ess(global_weights(state.filters, rho_tilde), cfg.ess_variant)
    lost = np.array([fs.lost for fs in state.filters])

    fusion = substream(state.seed, state.run, FUSION, t)
    resampled = refreshed = False
    if _refresh_due(cfg, t):
        refresh(state, fusion)
        refreshed = True
    elif ess <= cfg.epsilon * state.N:
        resampled = True
        if cfg.adaptive_refresh and fusion.random() < cfg.refresh_prob:
            refresh(state, fusion)
            refreshed = True
        elif cfg.global_resampling:
            global_resample(state, fusion)
        else:
            M_new = allocate(state.N, rho_bar, cfg.allocation_policy, cfg.M_min, fusion)
            for fs, m, r in zip(state.filters, M_new, rngs):
                pf.resample(fs, int(m), r, cfg.resampling_scheme)

    return StepReport(
        t=t,
        global_estimate=estimate,
        local_estimates=local,
        rho_bar=rho_bar,
        rho_tilde=rho_tilde,
        M=state.counts,
        ess=ess,
        resampled=resampled,
        refreshed=refreshed,
        map_model=map_model(rho_bar),
        lost=lost,
    )


@dataclass
class RunTrace:
    """Stacked per-step outputs of a run, one row per iteration."""

    t: np.ndarray
    estimates: np.ndarray
    local_estimates: np.ndarray
    rho_bar: np.ndarray
    rho_tilde: np.ndarray
    M: np.ndarray
    ess: np.ndarray
    resampled: np.ndarray
    refreshed: np.ndarray
    map_model: np.ndarray
    lost: np.ndarray

    @classmethod
    def from_reports(cls, reports):
        return cls(
            t=np.array([r.t for r in reports]),
            estimates=np.array([r.global_estimate for r in reports]),
            local_estimates=np.array([r.local_estimates for r in reports]),
            rho_bar=np.array([r.rho_bar for r in reports]),
            rho_tilde=np.array([r.rho_tilde for r in reports]),
            M=np.array([r.M for r in reports]),
            ess=np.array([r.ess for r in reports]),
            resampled=np.array([r.resampled for r in reports]),
            refreshed=np.array([r.refreshed for r in reports]),
            map_model=np.array([r.map_model for r in reports]),
            lost=np.array([r.lost for r in reports]),
        )


def run_mapf(bank, ys, N, config=None, seed=0, run=0, executor=None):
    """Filter the whole observation sequence ``ys`` and return a :class:`RunTrace`."""
    state = init_state(bank, N, config, seed=seed, run=run, executor=executor)
    reports = [step(state, y) for y in ys]
    return RunTrace.from_reports(reports)
