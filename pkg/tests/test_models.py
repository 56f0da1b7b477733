import math

import numpy as np
import pytest

from mapf.errors import (
    ConfigError,
    DimensionMismatch,
    EmptyBank,
    NonNormalizedPrior,
    ScheduleError,
)
from mapf.models import (
    FAMILIES,
    ModelBank,
    ModelSpec,
    TrueModelSchedule,
    build_model,
    simulate_truth,
    switching_model,
    validate_bank,
)
from mapf.scenarios import ts_m1, ts_m2, ts_switching_scenario


def identity_model(**kw):
    return ModelSpec(
        transition_sample=lambda x, t, rng: x.copy(),
        likelihood=lambda y, x, t: np.zeros(x.shape[0]),
        initial_sample=lambda m, rng: np.zeros((m, 1)),
        observation_sample=lambda x, t, rng: x.copy(),
        **kw,
    )


def test_validate_bank_uniform_ok():
    bank = ModelBank.from_models([identity_model(), identity_model()], [0.5, 0.5])
    assert validate_bank(bank)


def test_validate_bank_prior_sum():
    bank = ModelBank.from_models([identity_model() for _ in range(3)], [0.5, 0.5, 0.5])
    with pytest.raises(NonNormalizedPrior):
        validate_bank(bank)


def test_validate_bank_prior_tolerance():
    bank = ModelBank.from_models([identity_model() for _ in range(3)])
    assert validate_bank(bank)
    bank.models[0].prior_mass += 1e-11
    with pytest.raises(NonNormalizedPrior):
        validate_bank(bank)


def test_empty_bank():
    with pytest.raises(EmptyBank):
        validate_bank(ModelBank([]))
    with pytest.raises(EmptyBank):
        ModelBank.from_models([])


def test_dimension_mismatch():
    bank = ModelBank.from_models([identity_model(), identity_model(state_dim=2)])
    with pytest.raises(DimensionMismatch):
        validate_bank(bank)


def test_from_models_renumbers():
    bank = ModelBank.from_models([identity_model(id=9), identity_model(id=9)])
    assert [m.id for m in bank.models] == [1, 2]
    np.testing.assert_allclose(np.exp(bank.log_priors), [0.5, 0.5])


def test_proposal_hooks_need_each_other():
    with pytest.raises(ConfigError):
        identity_model(proposal_sample=lambda x, t, rng: x)
    with pytest.raises(ConfigError):
        identity_model(proposal_sample=lambda x, t, rng: x, proposal_logpdf=lambda x, xp, t: 0)


def test_default_initial_is_standard_normal():
    m = ModelSpec(transition_sample=None, likelihood=None, state_dim=3)
    x = m.initial_sample(100_000, np.random.default_rng(0))
    assert x.shape == (100_000, 3)
    np.testing.assert_allclose(x.var(axis=0), 1.0, atol=0.02)


@pytest.mark.parametrize("starts", [[2], [1, 1], [1, 5, 3]])
def test_schedule_rejects_bad_starts(starts):
    with pytest.raises(ScheduleError):
        TrueModelSchedule([(s, identity_model()) for s in starts])


def test_schedule_generator_lookup():
    a, b = identity_model(), identity_model()
    s = TrueModelSchedule([(1, a), (251, b)], labels=[1, 2])
    assert s.generator(250) is a and s.generator(251) is b
    lab = s.true_labels(500)
    assert (lab[:250] == 1).all() and (lab[250:] == 2).all()


def test_simulate_noiseless_identity_is_zero(rng):
    xs, ys = simulate_truth(TrueModelSchedule([(1, identity_model())]), 20, rng)
    assert not xs.any() and not ys.any()


def test_simulate_is_reproducible():
    sc = ts_switching_scenario()
    a = simulate_truth(sc.schedule, 500, np.random.default_rng(3))
    b = simulate_truth(sc.schedule, 500, np.random.default_rng(3))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_simulate_segments_concatenate():
    sc = ts_switching_scenario()
    xs, ys = simulate_truth(sc.schedule, 500, np.random.default_rng(5))
    r = np.random.default_rng(5)
    x1, y1 = simulate_truth(sc.schedule, 250, r)
    x2, y2 = simulate_truth(sc.schedule, 250, r, x_prev=x1[-1], t0=251)
    np.testing.assert_array_equal(np.vstack([x1, x2]), xs)
    np.testing.assert_array_equal(np.vstack([y1, y2]), ys)


def test_switching_observations_follow_schedule():
    # model 2 observes exp(-c x) so its observations are positive on average; model 1 are centred
    sc = ts_switching_scenario()
    means = []
    for s in range(20):
        _, ys = simulate_truth(sc.schedule, 500, np.random.default_rng(s))
        means.append((ys[:250].mean(), ys[250:].mean()))
    m = np.array(means).mean(axis=0)
    assert abs(m[0]) < 0.5 and m[1] > 0.5


def test_ts_m2_first_state_variance():
    m = ts_m2()
    x = m.initial_sample(100_000, np.random.default_rng(1))
    assert abs(x.var() - 1.0) < 0.03


def test_ts_m2_transition_moments():
    m = ts_m2()
    x = m.transition_sample(np.zeros((100_000, 1)), 2, np.random.default_rng(2))
    assert abs(x.mean()) < 0.03 and abs(x.var() - 1.0) < 0.05


def test_ts_m1_transition_at_origin():
    m = ts_m1()
    x = m.transition_sample(np.zeros((100_000, 1)), 2, np.random.default_rng(2))
    assert abs(x.mean()) < 0.03


def test_ts_m2_likelihood_at_origin():
    m = ts_m2()
    got = m.likelihood(np.array([1.0]), np.zeros((1, 1)), 1)[0]
    assert got == pytest.approx(-0.5 * math.log(2 * math.pi * 0.5))


def test_build_model_registry():
    assert {"ts_m1", "ts_m2", "param_grid", "route", "multimodal", "linear_gaussian", "discrete_hmm"} <= set(FAMILIES)
    m = build_model({"family": "ts_m2", "params": {"c": 0.3}})
    assert m.params["c"] == 0.3
    with pytest.raises(ConfigError):
        build_model({"family": "nope"})
    with pytest.raises(ConfigError):
        build_model({"params": {}})
    with pytest.raises(ConfigError):
        build_model({"family": "discrete_hmm", "params": {}})


def test_switching_model_dispatch():
    a = identity_model()
    b = ModelSpec(
        transition_sample=lambda x, t, rng: x + 1.0,
        likelihood=lambda y, x, t: np.ones(x.shape[0]),
    )
    sw = switching_model([(1, a), (3, b)])
    x = np.zeros((2, 1))
    assert (sw.transition_sample(x, 2, None) == 0).all()
    assert (sw.transition_sample(x, 3, None) == 1).all()
    assert (sw.likelihood(None, x, 4) == 1).all()
