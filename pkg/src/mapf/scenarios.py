"""Synthetic experiment families, exact oracles and run metrics.

Model families registered here:

``ts_m1``
    ``x_t = a x_{t-1} / (1 + b x_{t-1}^2) + v``, ``y_t = x_t + u``.
``ts_m2``
    ``x_t = x_{t-1} + v``, ``y_t = exp(-c x_t) + u``.
``param_grid``
    ``x_t = a |x_{t-1}| + v``, ``y_t = b log(x_t^2) + u``.
``linear_gaussian``
    ``x_t = A x_{t-1} + w``, ``y_t = H x_t + e`` with Gaussian noise; the
    Kalman filter gives its exact evidence.
``discrete_hmm``
    finite-state chain with categorical emissions; the forward algorithm
    gives its exact evidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from mapf.errors import UnsupportedModel
from mapf.models import ModelBank, ModelSpec, TrueModelSchedule, register_family

LOG_2PI = math.log(2.0 * math.pi)


def normal_logpdf(y, mean, var):
    return -0.5 * (LOG_2PI + math.log(var) + (y - mean) ** 2 / var)


def _scalar_obs(y):
    return float(np.ravel(y)[0])


def _from_x0(transition, x0, dim=1):
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, dim)

    def init(m, rng):
        return transition(np.repeat(x0, m, axis=0), 1, rng)

    return init


# -- time-series switching pair --------------------------------------------


@register_family("ts_m1")
def ts_m1(a=-10.0, b=3.0, sigma_v=1.0, obs_var=0.5, x0=0.0, **_):
    sv = float(sigma_v)

    def transition(x, t, rng):
        return a * x / (1.0 + b * x * x) + sv * rng.standard_normal(x.shape)

    def likelihood(y, x, t):
        return normal_logpdf(_scalar_obs(y), x[:, 0], obs_var)

    def observe(x, t, rng):
        return x + math.sqrt(obs_var) * rng.standard_normal(x.shape)

    return ModelSpec(
        transition_sample=transition,
        likelihood=likelihood,
        initial_sample=_from_x0(transition, x0),
        observation_sample=observe,
        family="ts_m1",
        params=dict(a=a, b=b, sigma_v=sigma_v, obs_var=obs_var, x0=x0),
    )


@register_family("ts_m2")
def ts_m2(c=0.2, sigma_v=1.0, obs_var=0.5, x0=0.0, **_):
    sv = float(sigma_v)

    def transition(x, t, rng):
        return x + sv * rng.standard_normal(x.shape)

    def likelihood(y, x, t):
        return normal_logpdf(_scalar_obs(y), np.exp(-c * x[:, 0]), obs_var)

    def observe(x, t, rng):
        return np.exp(-c * x) + math.sqrt(obs_var) * rng.standard_normal(x.shape)

    return ModelSpec(
        transition_sample=transition,
        likelihood=likelihood,
        initial_sample=_from_x0(transition, x0),
        observation_sample=observe,
        family="ts_m2",
        params=dict(c=c, sigma_v=sigma_v, obs_var=obs_var, x0=x0),
    )


def build_ts_bank(**kw):
    """The two-model time-series bank with a uniform prior."""
    m1 = ts_m1(**{k: v for k, v in kw.items() if k in ("a", "b", "sigma_v", "obs_var", "x0")})
    m2 = ts_m2(**{k: v for k, v in kw.items() if k in ("c", "sigma_v", "obs_var", "x0")})
    return ModelBank.from_models([m1, m2])


@dataclass
class Scenario:
    """A bank together with the schedule that generates data for it."""

    bank: ModelBank
    schedule: TrueModelSchedule
    T: int

    def true_labels(self):
        return self.schedule.true_labels(self.T)


def ts_switching_scenario(T=500, switch=250, **kw):
    """First ``switch`` observations from model 1, the rest from model 2."""
    bank = build_ts_bank(**kw)
    m1, m2 = bank.models
    g1 = ts_m1(**m1.params)
    g2 = ts_m2(**m2.params)
    sched = TrueModelSchedule([(1, g1), (switch + 1, g2)], labels=[1, 2])
    return Scenario(bank, sched, T)


# -- parameter grid --------------------------------------------------------


@register_family("param_grid")
def param_grid(a=1.0, b=1.0, sigma1=1.0, sigma2=1.0, x0=0.0, **_):
    s1, s2 = float(sigma1), float(sigma2)
    v2 = s2 * s2

    def transition(x, t, rng):
        return a * np.abs(x) + s1 * rng.standard_normal(x.shape)

    def likelihood(y, x, t):
        with np.errstate(divide="ignore"):
            mean = b * np.log(x[:, 0] ** 2)
        out = normal_logpdf(_scalar_obs(y), mean, v2)
        return np.where(np.isfinite(out), out, -np.inf)

    def observe(x, t, rng):
        with np.errstate(divide="ignore"):
            return b * np.log(x * x) + s2 * rng.standard_normal(x.shape)

    return ModelSpec(
        transition_sample=transition,
        likelihood=likelihood,
        initial_sample=_from_x0(transition, x0),
        observation_sample=observe,
        family="param_grid",
        params=dict(a=a, b=b, sigma1=sigma1, sigma2=sigma2, x0=x0),
    )


SETTINGS = ("S1", "S2", "S3")


def grid_parameters(K, setting, rng):
    """Per-model ``(a, b, sigma1, sigma2)``; model ``K`` is always ``(1, 1, 1, 1)``.

    Noise scales that a setting randomizes are drawn from U(0.1, 10), in
    model order, ``sigma1`` before ``sigma2``.
    """
    if K < 2:
        raise ValueError("parameter grid needs K >= 2")
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}")
    out = []
    for k in range(1, K):
        a = k / K
        b = 1.0 / 3.0 + 10.0 * (k - 1) / K
        s1 = s2 = 1.0
        if setting == "S1":
            s1 = rng.uniform(0.1, 10.0)
            s2 = rng.uniform(0.1, 10.0)
        elif setting == "S2":
            b = 1.0
            s1 = rng.uniform(0.1, 10.0)
        else:
            a = 1.0
            s2 = rng.uniform(0.1, 10.0)
        out.append((a, b, s1, s2))
    out.append((1.0, 1.0, 1.0, 1.0))
    return out


def build_grid_bank(K, setting, rng):
    params = grid_parameters(K, setting, rng)
    return ModelBank.from_models(
        [param_grid(a=a, b=b, sigma1=s1, sigma2=s2) for a, b, s1, s2 in params]
    )


def param_grid_scenario(K=5, setting="S1", rng=None, T=500):
    bank = build_grid_bank(K, setting, rng)
    truth = param_grid(**bank.models[-1].params)
    return Scenario(bank, TrueModelSchedule([(1, truth)], labels=[K]), T)


# -- linear-Gaussian -------------------------------------------------------


def _mat(v, n=None):
    a = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if n is not None and a.shape == (1, 1) and n > 1:
        a = a[0, 0] * np.eye(n)
    return a


@register_family("linear_gaussian")
def linear_gaussian(A=1.0, H=1.0, Q=1.0, R=1.0, m0=0.0, P0=1.0, **_):
    """``x_1 ~ N(m0, P0)``; ``A``, ``H``, ``Q``, ``R``, ``P0`` may be scalars or matrices."""
    A = _mat(A)
    dx = A.shape[0]
    H = _mat(H)
    if H.shape[1] != dx:
        H = H[0, 0] * np.eye(dx)
    dy = H.shape[0]
    Q, R, P0 = _mat(Q, dx), _mat(R, dy), _mat(P0, dx)
    m0 = np.broadcast_to(np.asarray(m0, dtype=np.float64), (dx,)).copy()
    LQ = _psd_sqrt(Q)
    LR = _psd_sqrt(R)
    LP = _psd_sqrt(P0)
    Rinv = np.linalg.inv(R) if np.all(np.linalg.eigvalsh(R) > 0) else None
    logdet_R = float(np.linalg.slogdet(R)[1]) if Rinv is not None else None

    def transition(x, t, rng):
        return x @ A.T + rng.standard_normal(x.shape) @ LQ.T

    def initial(m, rng):
        return m0 + rng.standard_normal((m, dx)) @ LP.T

    def likelihood(y, x, t):
        if Rinv is None:
            raise UnsupportedModel("likelihood needs a positive-definite observation covariance R")
        r = np.ravel(y)[None, :] - x @ H.T
        q = np.einsum("mi,ij,mj->m", r, Rinv, r)
        return -0.5 * (dy * LOG_2PI + logdet_R + q)

    def observe(x, t, rng):
        return x @ H.T + rng.standard_normal((x.shape[0], dy)) @ LR.T

    def density(x, xprev, t):
        d = x - xprev @ A.T
        Qi = np.linalg.inv(Q)
        return -0.5 * (dx * LOG_2PI + np.linalg.slogdet(Q)[1] + np.einsum("mi,ij,mj->m", d, Qi, d))

    return ModelSpec(
        transition_sample=transition,
        likelihood=likelihood,
        state_dim=dx,
        obs_dim=dy,
        initial_sample=initial,
        observation_sample=observe,
        transition_density=density,
        family="linear_gaussian",
        params=dict(A=A, H=H, Q=Q, R=R, m0=m0, P0=P0),
    )


def _psd_sqrt(S, tol=1e-12):
    S = np.asarray(S, dtype=np.float64)
    if not np.allclose(S, S.T):
        raise ValueError("covariance matrix is not symmetric")
    vals, vecs = np.linalg.eigh(S)
    if np.any(vals < -tol * max(1.0, np.abs(vals).max())):
        raise ValueError(f"covariance matrix is not positive semi-definite (eigenvalues {vals})")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class KalmanResult:
    means: np.ndarray
    covs: np.ndarray
    log_evidence: float
    log_evidence_steps: np.ndarray


def kalman_evidence(model, ys):
    """Exact filtered means and log evidence by the prediction-error decomposition.

    ``model`` is a ``linear_gaussian`` :class:`ModelSpec` or its parameter dict.
    """
    if isinstance(model, ModelSpec):
        if model.family != "linear_gaussian":
            raise UnsupportedModel(f"Kalman oracle needs a linear_gaussian model, got {model.family!r}")
        p = model.params
    else:
        p = linear_gaussian(**model).params
    A, H, Q, R, m, P = p["A"], p["H"], p["Q"], p["R"], p["m0"].copy(), p["P0"].copy()
    for S in (Q, R, P):
        _psd_sqrt(S)
    ys = np.asarray(ys, dtype=np.float64).reshape(len(ys), -1)
    T, dx = len(ys), A.shape[0]
    means = np.empty((T, dx))
    covs = np.empty((T, dx, dx))
    steps = np.empty(T)
    for t in range(T):
        if t > 0:
            m = A @ m
            P = A @ P @ A.T + Q
        S = H @ P @ H.T + R
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as e:
            raise ValueError("innovation covariance is not positive definite") from e
        r = ys[t] - H @ m
        z = np.linalg.solve(L, r)
        steps[t] = -0.5 * (len(r) * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + z @ z)
        Kg = np.linalg.solve(S, H @ P).T
        m = m + Kg @ r
        P = P - Kg @ H @ P
        P = 0.5 * (P + P.T)
        means[t] = m
        covs[t] = P
    return KalmanResult(means, covs, float(steps.sum()), steps)


# -- discrete HMM ----------------------------------------------------------


@register_family("discrete_hmm")
def discrete_hmm(pi, A, B, **_):
    """States ``0..S-1`` stored as floats; ``B[s, o]`` is the emission probability of ``o``."""
    pi = np.asarray(pi, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    S = pi.size
    if A.shape != (S, S) or B.shape[0] != S:
        raise ValueError("inconsistent HMM shapes")
    for name, P in (("pi", pi[None, :]), ("A", A), ("B", B)):
        if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0):
            raise ValueError(f"rows of {name} must be probability vectors")
    cumA = np.cumsum(A, axis=1)
    cumpi = np.cumsum(pi)
    with np.errstate(divide="ignore"):
        logB = np.log(B)

    def _draw(cum, rng):
        u = rng.random(cum.shape[0])
        return np.minimum((u[:, None] >= cum).sum(axis=1), S - 1)

    def initial(m, rng):
        return _draw(np.broadcast_to(cumpi, (m, S)), rng).astype(np.float64)[:, None]

    def transition(x, t, rng):
        return _draw(cumA[x[:, 0].astype(np.int64)], rng).astype(np.float64)[:, None]

    def likelihood(y, x, t):
        return logB[x[:, 0].astype(np.int64), int(_scalar_obs(y))]

    def observe(x, t, rng):
        cumB = np.cumsum(B, axis=1)[x[:, 0].astype(np.int64)]
        u = rng.random(x.shape[0])
        return np.minimum((u[:, None] >= cumB).sum(axis=1), B.shape[1] - 1).astype(np.float64)[:, None]

    def density(x, xprev, t):
        with np.errstate(divide="ignore"):
            return np.log(A[xprev[:, 0].astype(np.int64), x[:, 0].astype(np.int64)])

    return ModelSpec(
        transition_sample=transition,
        likelihood=likelihood,
        initial_sample=initial,
        observation_sample=observe,
        transition_density=density,
        family="discrete_hmm",
        params=dict(pi=pi, A=A, B=B),
    )


def hmm_log_evidence(params, ys):
    """Log ``p(y_{1:T})`` for one discrete HMM by the scaled forward algorithm."""
    pi, A, B = params["pi"], params["A"], params["B"]
    if pi.size > 10:
        raise UnsupportedModel("exact HMM oracle is limited to |X| <= 10")
    obs = np.asarray(ys).reshape(-1).astype(np.int64)
    logZ = 0.0
    alpha = pi
    for t, o in enumerate(obs):
        if t > 0:
            alpha = alpha @ A
        alpha = alpha * B[:, o]
        c = alpha.sum()
        if c <= 0:
            return -math.inf
        logZ += math.log(c)
        alpha = alpha / c
    return logZ


@dataclass
class HmmPosterior:
    posterior: np.ndarray
    log_evidence: np.ndarray


def hmm_model_posterior(bank, ys):
    """Exact ``p(M_k | y_{1:T})`` for a bank of discrete HMMs."""
    for m in bank.models:
        if m.family != "discrete_hmm":
            raise UnsupportedModel(f"model {m.id} is {m.family!r}, not discrete_hmm")
    logZ = np.array([hmm_log_evidence(m.params, ys) for m in bank.models])
    a = logZ + bank.log_priors
    a = a - a.max()
    post = np.exp(a)
    return HmmPosterior(post / post.sum(), logZ)


# -- metrics ---------------------------------------------------------------


@dataclass
class RunMetrics:
    mse: float
    match_pct: Optional[float]


def metrics(estimates, map_seq, truth_states, truth_models=None):
    """Mean squared error over the run and the percentage of correct MAP picks."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truth_states, dtype=np.float64)
    if est.shape[0] != tru.shape[0]:
        raise ValueError(f"length mismatch: {est.shape[0]} estimates, {tru.shape[0]} states")
    est = est.reshape(len(est), -1)
    tru = tru.reshape(len(tru), -1)
    mse = float(np.mean(np.sum((est - tru) ** 2, axis=1)))
    match = None
    if truth_models is not None:
        ms = np.asarray(map_seq)
        tm = np.asarray(truth_models)
        if ms.shape != tm.shape or ms.shape[0] != est.shape[0]:
            raise ValueError("length mismatch between MAP sequence and true models")
        match = float(100.0 * np.mean(ms == tm))
    return RunMetrics(mse, match)
