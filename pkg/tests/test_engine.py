import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapf import engine, pf
from mapf.engine import (
    MapfConfig,
    allocate,
    empirical_posteriors,
    global_ess,
    global_mmse,
    global_resample,
    global_weights,
    init_state,
    map_model,
    model_posteriors,
    refresh,
    run_mapf,
    step,
)
from mapf.errors import ConfigError, InfeasibleFloor
from mapf.models import ModelBank, ModelSpec, TrueModelSchedule, simulate_truth
from mapf.rng import run_rng
from mapf.scenarios import build_grid_bank, linear_gaussian, param_grid, ts_m1, ts_switching_scenario

U2 = np.log([0.5, 0.5])


def test_model_posteriors_examples():
    np.testing.assert_allclose(model_posteriors(np.log([1 / 3] * 3), np.zeros(3)), [1 / 3] * 3)
    np.testing.assert_allclose(
        model_posteriors(np.log([1 / 3] * 3), np.log([2.0, 1.0, 1.0])), [0.5, 0.25, 0.25], rtol=1e-14
    )


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-800, 100), min_size=1, max_size=8), st.floats(-500, 500))
def test_model_posteriors_scale_invariant(logZ, c):
    lp = np.log(np.full(len(logZ), 1 / len(logZ)))
    a = model_posteriors(lp, np.array(logZ))
    b = model_posteriors(lp, np.array(logZ) + c)
    assert abs(a.sum() - 1) < 1e-12
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_empirical_posteriors_examples():
    np.testing.assert_allclose(empirical_posteriors(U2, np.log([3.0, 1.0]), [10, 30]), [0.5, 0.5])
    lz = np.log([0.7, 0.2])
    np.testing.assert_allclose(empirical_posteriors(U2, lz, [20, 20]), model_posteriors(U2, lz))
    np.testing.assert_allclose(empirical_posteriors([0.0], [-3.0], [7]), [1.0])


def _filters(rng, counts):
    out = []
    for k, m in enumerate(counts):
        fs = pf.init_filter(k + 1, m)
        fs.states = rng.normal(size=(m, 2))
        fs.log_xi = rng.normal(0, 3, m)
        fs.log_Zhat = float(np.log(np.mean(np.exp(fs.log_xi))))
        out.append(fs)
    return out


def test_global_weights_examples(rng):
    fs = _filters(rng, [5])
    g = global_weights(fs, [1.0])
    np.testing.assert_allclose(g[0], pf.normalized_weights(fs[0]))
    fs = _filters(rng, [2, 2])
    for f in fs:
        f.log_xi = np.zeros(2)
    g = np.concatenate(global_weights(fs, [0.5, 0.5]))
    np.testing.assert_allclose(g, 0.25)


def test_ess_examples():
    for v in engine.ESS_VARIANTS:
        assert global_ess(np.full(10, 0.1), v) == pytest.approx(10)
        assert global_ess(np.array([1.0, 0.0, 0.0]), v) == pytest.approx(1)
    g = np.array([0.5, 0.25, 0.25])
    assert global_ess(g, "perplexity") == pytest.approx(1 / 0.375)
    assert global_ess(g, "max-weight") == pytest.approx(2)


def test_allocate_examples():
    np.testing.assert_array_equal(allocate(100, [0.7, 0.3]), [70, 30])
    np.testing.assert_array_equal(allocate(10, [0.335, 0.335, 0.33]), [4, 3, 3])
    np.testing.assert_array_equal(allocate(10, [0.99, 0.01]), [8, 2])
    with pytest.raises(InfeasibleFloor):
        allocate(5, [0.5, 0.5, 0.0], M_min=2)


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 10),
    st.integers(0, 4),
    st.integers(0, 5000),
    st.integers(0, 2**32 - 1),
    st.sampled_from(engine.POLICIES),
)
def test_allocate_conserves_budget(K, M_min, extra, seed, policy):
    r = np.random.default_rng(seed)
    N = M_min * K + extra
    if N == 0:
        return
    rho = r.dirichlet(np.full(K, 0.3))
    M = allocate(N, rho, policy, M_min, r)
    assert M.sum() == N
    assert np.all(M >= M_min)
    if policy == "largest-remainder" and M_min == 0:
        # no floor: each count is within one of its proportional share
        assert np.all(np.abs(M - N * rho) < 1 + 1e-9)


def test_global_mmse_examples():
    assert global_mmse([1.0], [[2.5]])[0] == 2.5
    assert global_mmse([0.5, 0.5], [[2.0], [4.0]])[0] == pytest.approx(3.0)
    assert global_mmse([1.0, 0.0], [[2.0], [np.nan]])[0] == 2.0


def test_map_model_examples():
    assert map_model([0.2, 0.7, 0.1]) == 2
    assert map_model([0.5, 0.5]) == 1
    assert map_model([1.0]) == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_two_stage_equals_flat_estimator(K, seed):
    r = np.random.default_rng(seed)
    counts = r.integers(2, 50, K)
    fs = _filters(r, counts)
    lz = np.array([f.log_Zhat for f in fs])
    lp = np.log(np.full(K, 1 / K))
    rho_t = empirical_posteriors(lp, lz, counts)
    local = np.array([pf.local_mmse(f) for f in fs])
    two_stage = global_mmse(rho_t, local)
    gamma = np.concatenate(global_weights(fs, rho_t))
    flat = gamma @ np.concatenate([f.states for f in fs])
    assert abs(gamma.sum() - 1) < 1e-12
    assert np.max(np.abs(two_stage - flat)) < 1e-10


# -- step ------------------------------------------------------------------


def ts_data(seed, T=500):
    sc = ts_switching_scenario(T=T)
    xs, ys = simulate_truth(sc.schedule, T, run_rng(seed, 0, 0))
    return sc, xs, ys


def test_step_invariants():
    sc, xs, ys = ts_data(1, 200)
    st_ = init_state(sc.bank, 301, MapfConfig(refresh_period=50, epsilon=0.5), seed=2)
    for y in ys:
        rep = step(st_, y)
        assert rep.M.sum() == 301
        assert abs(rep.rho_bar.sum() - 1) < 1e-12 and abs(rep.rho_tilde.sum() - 1) < 1e-12
        assert 1 - 1e-9 <= rep.ess <= 301 + 1e-9
        assert np.all(rep.M >= 2)
        for f in st_.filters:
            if f.resampled_last:
                assert np.all(f.log_xi == f.log_xi[0])


def test_epsilon_zero_never_resamples():
    sc, xs, ys = ts_data(3, 60)
    st_ = init_state(sc.bank, 100, MapfConfig(epsilon=0.0), seed=1)
    sums = [np.zeros(50), np.zeros(50)]
    for y in ys:
        rep = step(st_, y)
        assert not rep.resampled
        for k, f in enumerate(st_.filters):
            sums[k] += f.log_lambda
    for k, f in enumerate(st_.filters):
        np.testing.assert_allclose(f.log_xi, sums[k], rtol=1e-12)


def test_executor_gives_identical_results():
    sc, xs, ys = ts_data(4, 100)
    cfg = MapfConfig(refresh_period=30)
    a = run_mapf(sc.bank, ys, 200, cfg, seed=9)
    with ThreadPoolExecutor(4) as ex:
        b = run_mapf(sc.bank, ys, 200, cfg, seed=9, executor=ex)
    np.testing.assert_array_equal(a.estimates, b.estimates)
    np.testing.assert_array_equal(a.M, b.M)


def test_identical_models_share_posterior():
    lg = dict(A=0.9, H=1.0, Q=0.5, R=1.0)
    bank = ModelBank.from_models([linear_gaussian(**lg) for _ in range(3)])
    sched = TrueModelSchedule([(1, linear_gaussian(**lg))])
    finals = []
    for s in range(100):
        _, ys = simulate_truth(sched, 10, np.random.default_rng(s))
        tr = run_mapf(bank, ys, 3000, MapfConfig(epsilon=0.0), seed=s)
        finals.append(tr.rho_bar[-1])
    np.testing.assert_allclose(np.mean(finals, axis=0), 1 / 3, atol=0.02)


def test_allocation_symmetric_when_all_models_true():
    bank = ModelBank.from_models([ts_m1(), ts_m1()])
    sched = ts_switching_scenario(T=40, switch=40).schedule
    Ms = []
    for s in range(200):
        _, ys = simulate_truth(sched, 40, np.random.default_rng(1000 + s))
        tr = run_mapf(bank, ys, 2000, MapfConfig(epsilon=0.5), seed=s)
        Ms.append(tr.M.mean(axis=0))
    np.testing.assert_allclose(np.mean(Ms, axis=0), 1000, rtol=0.05)


def test_true_filter_gains_particles_early():
    shares = []
    for s in range(20):
        sc, xs, ys = ts_data(100 + s, 30)
        tr = run_mapf(sc.bank, ys, 2000, MapfConfig(), seed=s)
        shares.append(tr.M[-1, 0] / 2000)
    assert np.median(shares) > 0.9


def test_common_likelihood_matches_mixture_prior_filter():
    # S2 banks share the likelihood, so MAPF without resampling is one filter
    # over the pooled particles with a model-mixture prior
    bank = build_grid_bank(4, "S2", np.random.default_rng(0))
    truth = param_grid(**bank.models[-1].params)
    _, ys = simulate_truth(TrueModelSchedule([(1, truth)]), 25, np.random.default_rng(1))
    st_ = init_state(bank, 400, MapfConfig(epsilon=0.0), seed=3)
    logw = None
    for y in ys:
        rep = step(st_, y)
        pool = np.concatenate([f.states for f in st_.filters])
        ll = bank.models[0].likelihood(y, pool, st_.t)
        for m in bank.models[1:]:
            np.testing.assert_array_equal(m.likelihood(y, pool, st_.t), ll)
        logw = ll if logw is None else logw + ll
        w = np.exp(logw - logw.max())
        mix = (w / w.sum()) @ pool
        assert np.max(np.abs(rep.global_estimate - mix)) < 1e-10


def test_invalid_configs():
    sc, _, _ = ts_data(0, 5)
    with pytest.raises(ConfigError):
        init_state(sc.bank, 3, MapfConfig())
    with pytest.raises(ConfigError):
        init_state(sc.bank, 100, MapfConfig(epsilon=1.5))
    with pytest.raises(ConfigError):
        init_state(sc.bank, 100, MapfConfig(M_min=1))
    init_state(sc.bank, 100, MapfConfig(M_min=0, global_resampling=True))


# -- refresh ---------------------------------------------------------------


def test_refresh_schedule_and_partition():
    sc, xs, ys = ts_data(5)
    tr = run_mapf(sc.bank, ys, 2001, MapfConfig(refresh_period=125), seed=1)
    np.testing.assert_array_equal(tr.t[tr.refreshed], [125, 250, 375, 500])
    for i in np.flatnonzero(tr.refreshed):
        assert set(tr.M[i].tolist()) <= {1000, 1001}
        assert tr.M[i].sum() == 2001


def test_forced_refresh_times():
    sc, xs, ys = ts_data(5, 100)
    tr = run_mapf(sc.bank, ys, 200, MapfConfig(refresh_period=40, forced_refresh_times=(7, 55)), seed=1)
    np.testing.assert_array_equal(tr.t[tr.refreshed], [7, 40, 55, 80])


def test_adaptive_refresh_only_on_trigger():
    sc, xs, ys = ts_data(6, 300)
    tr = run_mapf(sc.bank, ys, 300, MapfConfig(adaptive_refresh=True, refresh_prob=0.5, epsilon=0.5), seed=2)
    assert tr.refreshed.any()
    assert np.all(tr.resampled[tr.refreshed])


def flip_bank(t_star):
    """Two static models whose per-step likelihood swaps quality at ``t_star``."""

    def model(good_first):
        def ll(y, x, t):
            good = (t < t_star) == good_first
            return np.full(x.shape[0], math.log(0.9 if good else 0.3))

        return ModelSpec(transition_sample=lambda x, t, rng: x, likelihood=ll)

    return ModelBank.from_models([model(True), model(False)])


def test_refresh_lets_new_winner_overtake():
    bank = flip_bank(101)
    ys = [np.zeros(1)] * 150
    with_r = run_mapf(bank, ys, 100, MapfConfig(refresh_period=50), seed=0)
    without = run_mapf(bank, ys, 100, MapfConfig(), seed=0)
    # after the refresh at 100, model 2 is better and takes over within a window
    assert with_r.map_model[110] == 2 and with_r.map_model[149] == 2
    # without refreshing, 100 losing steps cannot be undone in 50
    assert without.map_model[149] == 1


def test_refresh_resets_accumulators(rng):
    sc, xs, ys = ts_data(7, 10)
    st_ = init_state(sc.bank, 100, MapfConfig(), seed=1)
    for y in ys:
        step(st_, y)
    refresh(st_, rng)
    for f in st_.filters:
        assert f.M == 50 and f.log_Zhat == 0.0 and f.log_Ztilde == 0.0
        assert np.all(f.log_xi == 0.0)


# -- global resampling -------------------------------------------------------


def _state_after(N, rho, seed=0):
    sc, xs, ys = ts_data(8, 3)
    st_ = init_state(sc.bank, N, MapfConfig(global_resampling=True, M_min=0), seed=seed)
    for y in ys:
        step(st_, y)
    st_.rho_bar = np.asarray(rho, dtype=np.float64)
    return st_


def test_global_resample_degenerate():
    st_ = _state_after(200, [1.0, 0.0])
    global_resample(st_, np.random.default_rng(0))
    np.testing.assert_array_equal(st_.counts, [200, 0])
    # the dormant filter has zero posterior until a refresh revives it
    sc, xs, ys = ts_data(8, 10)
    rep = step(st_, ys[3])
    assert rep.rho_bar[1] == 0.0 and np.isnan(rep.local_estimates[1]).all()
    refresh(st_, np.random.default_rng(1))
    np.testing.assert_array_equal(st_.counts, [100, 100])
    rep = step(st_, ys[4])
    assert rep.rho_bar[1] > 0.0


def test_global_resample_expected_counts():
    st_ = _state_after(1000, [0.25, 0.75])
    template = [(f.states.copy(), f.log_xi.copy(), f.log_lambda.copy(), f.log_Zhat) for f in st_.filters]
    r = np.random.default_rng(3)
    counts = []
    for _ in range(10_000):
        for f, (s, lx, ll, lz) in zip(st_.filters, template):
            f.states, f.log_xi, f.log_lambda, f.log_Zhat = s, lx, ll, lz
        global_resample(st_, r)
        assert st_.counts.sum() == 1000
        counts.append(st_.counts[0])
    assert abs(np.mean(counts) / 1000 - 0.25) < 0.01


def test_global_resampling_mode_runs():
    sc, xs, ys = ts_data(9, 300)
    tr = run_mapf(sc.bank, ys, 500, MapfConfig(global_resampling=True, M_min=0, refresh_period=100), seed=4)
    assert np.all(tr.M.sum(axis=1) == 500)
    np.testing.assert_allclose(tr.rho_bar.sum(axis=1), 1, atol=1e-12)
