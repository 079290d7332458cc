import numpy as np
import pytest
from scipy import stats

from conftest import random_counts

from mlndlm.compositional import alr_inverse, alr_to_clr
from mlndlm.filter import filter
from mlndlm.model import CountDataset, HyperPrior, ModelSpec, builtin_random_walk
from mlndlm.objective import multinomial_loglik
from mlndlm.optimize import map_estimate
from mlndlm.samplers import (DMDBConfig, GibbsError, cu_pipeline,
                             dmdb_sample_eta, ess_report, effective_sample_size, gibbs_chain,
                             gibbs_w_update, mdb_sample_eta, transition_noise, w_posterior,
                             whiten)
from mlndlm.simulator import SimConfig, simulate, simulate_from_spec
from mlndlm.smoother import StateDraw, rng_for


def test_dmdb_defaults():
    cfg = DMDBConfig()
    assert cfg.alpha == 0.5 and cfg.num_samples == 2000


@pytest.mark.parametrize("kw", [{"alpha": 0.0}, {"alpha": [1.0, -1.0]}, {"num_samples": 0}])
def test_dmdb_config_rejects(kw):
    with pytest.raises(ValueError):
        DMDBConfig(**kw)


def test_dmdb_beta_moments():
    # D = 2: pi_1 ~ Beta(c pi_hat + alpha, c (1 - pi_hat) + alpha)
    eta_hat = np.array([[0.4, -1.0]])
    data = CountDataset(np.array([[30, 5], [20, 45]]))
    S = 20_000
    eta = dmdb_sample_eta(eta_hat, data, DMDBConfig(num_samples=S, seed=3))
    pi = alr_inverse(eta, axis=1)[:, 0, :]
    pi_hat = alr_inverse(eta_hat, axis=0)[0]
    want = (pi_hat * 50 + 0.5) / (50 + 1.0)
    se = pi.std(axis=0) / np.sqrt(S)
    assert np.all(np.abs(pi.mean(axis=0) - want) <= 3 * se)


def test_mdb_beta_moments():
    data = CountDataset(np.array([[30, 5], [20, 45]]))
    S = 20_000
    pi = alr_inverse(mdb_sample_eta(data, DMDBConfig(num_samples=S, seed=3)), axis=1)[:, 0, :]
    want = (np.array([30, 5]) + 0.5) / 51.0
    assert np.all(np.abs(pi.mean(axis=0) - want) <= 3 * pi.std(axis=0) / np.sqrt(S))


def test_mdb_empty_column_is_symmetric():
    data = CountDataset(np.zeros((3, 1), dtype=int))
    eta = mdb_sample_eta(data, DMDBConfig(num_samples=40_000, seed=1))
    clr_mean = alr_to_clr(eta, axis=1).mean(axis=0)[:, 0]
    assert np.allclose(clr_mean, 0, atol=0.05)


def test_mdb_missing_columns_nan():
    data = CountDataset(np.ones((3, 3), dtype=int), [True, False, True])
    eta = mdb_sample_eta(data, DMDBConfig(num_samples=5))
    assert np.all(np.isnan(eta[:, :, 1])) and np.all(np.isfinite(eta[:, :, [0, 2]]))


def test_dmdb_tightens_with_total():
    eta_hat = np.array([[0.3], [-0.2]])
    variances = []
    for n in (10, 100, 1000):
        data = CountDataset(np.array([[n], [0], [0]]))
        eta = dmdb_sample_eta(eta_hat, data, DMDBConfig(num_samples=4000, seed=0))
        variances.append(eta[:, :, 0].var(axis=0).sum())
    assert variances[0] > variances[1] > variances[2]


def test_debiasing_mode_at_eta_hat():
    # pseudo-counts c pi_hat give a multinomial likelihood maximized at eta_hat
    eta_hat, c = 0.7, 80.0
    pc = c * alr_inverse(np.array([eta_hat]))
    grid = eta_hat + np.linspace(-0.5, 0.5, 201)
    ll = [multinomial_loglik(np.array([[x]]), pc[:, None], constants=False)[0] for x in grid]
    assert grid[int(np.argmax(ll))] == pytest.approx(eta_hat)


def test_dmdb_columns_independent(rng):
    data = random_counts(rng, 3, 2, n_range=(40, 41))
    eta = dmdb_sample_eta(np.zeros((2, 2)), data, DMDBConfig(num_samples=20_000, seed=2))
    r = np.corrcoef(eta[:, 0, 0], eta[:, 0, 1])[0, 1]
    assert abs(r) < 4 / np.sqrt(20_000)


def test_dmdb_missing_fill_is_forecast_t():
    spec = builtin_random_walk(2, 3, 0.45)
    data = CountDataset(np.array([[10, 0, 12], [10, 0, 8]]), [True, False, True])
    eta_hat = np.array([[0.1, 0.2, 0.4]])
    eta = dmdb_sample_eta(eta_hat, data, DMDBConfig(num_samples=30_000, seed=4), spec=spec)
    tr = filter(spec, eta_hat, data)
    f = tr.A[1, 0, 0]
    q = 1 + tr.R[1, 0, 0]
    dof = tr.nu_before(1)  # nu - p + 1, p = 1
    scale = np.sqrt(q * tr.xi_before(1)[0, 0] / dof)
    ks = stats.kstest(eta[:, 0, 1], stats.t(dof, loc=f, scale=scale).cdf).statistic
    assert ks < 0.015


def test_dmdb_needs_spec_for_missing():
    data = CountDataset(np.ones((2, 2), dtype=int), [True, False])
    with pytest.raises(ValueError):
        dmdb_sample_eta(np.zeros((1, 2)), data)


def test_pipeline_shapes_and_summary():
    data, truth = simulate(SimConfig(T_total=60, series_length=30, seed=3))
    d = cu_pipeline(truth["spec"], data, DMDBConfig(num_samples=50, seed=1))
    assert d.eta.shape == (50, 2, 60) and d.theta.shape == (50, 1, 2, 60)
    assert d.theta0.shape == (50, 2, 1, 2) and d.sigma.shape == (50, 2, 2)
    assert np.all(np.linalg.eigvalsh(d.sigma) > 0)
    for part in d.summary().values():
        assert np.all(part["lower"] <= part["mean"]) and np.all(part["mean"] <= part["upper"])
    assert np.allclose(d.summary()["theta"]["mean"].sum(axis=1), 0, atol=1e-12)
    assert d.metadata["missing_filled_from_forecast"] == int((~data.observed).sum())


def test_pipeline_thread_and_block_invariance():
    data, truth = simulate(SimConfig(T_total=40, series_length=40, seed=5))
    cfg = DMDBConfig(num_samples=70, seed=9)
    fit = map_estimate(truth["spec"], data)
    a = cu_pipeline(truth["spec"], data, cfg, map_result=fit, threads=1)
    b = cu_pipeline(truth["spec"], data, cfg, map_result=fit, threads=4)
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.sigma, b.sigma)
    c = cu_pipeline(truth["spec"], data, DMDBConfig(num_samples=20, seed=9), map_result=fit)
    assert np.array_equal(c.eta, a.eta[:20])


def test_degenerate_concentration_matches_smoothing():
    data, truth = simulate(SimConfig(T_total=30, series_length=30, missing_fraction=0.0,
                                     n_total=10**9, seed=6))
    spec = truth["spec"]
    fit = map_estimate(spec, data)
    d = cu_pipeline(spec, data, DMDBConfig(num_samples=1, seed=0), map_result=fit)
    assert np.allclose(d.eta[0], fit.eta_hat, atol=1e-3)


def test_mc_error_halves():
    data, truth = simulate(SimConfig(T_total=30, series_length=30, seed=8))
    fit = map_estimate(truth["spec"], data)
    spread = []
    for S in (200, 800):
        means = [cu_pipeline(truth["spec"], data, DMDBConfig(num_samples=S, seed=r), map_result=fit)
                 .theta.mean(axis=0) for r in range(8)]
        spread.append(np.std(means, axis=0).mean())
    assert 0.3 < spread[1] / spread[0] < 0.75


def _fixed_draw(rng, T=30, Q=1, p=2, w=0.4):
    spec = ModelSpec(F=np.ones(Q), G=np.eye(Q), W=np.eye(Q) * w, gamma=1.0, M0=np.zeros((Q, p)),
                     C0=np.eye(Q), Xi0=np.eye(p), nu0=p + 3)
    sigma = np.array([[1.0, 0.4], [0.4, 0.8]])[:p, :p]
    _, theta, theta0, _ = simulate_from_spec(spec, (T,), sigma, rng, n_total=0)
    return spec, StateDraw(theta=theta, theta0=theta0, sigma=sigma)


def test_whitening_removes_sigma(rng):
    spec, draw = _fixed_draw(rng)
    om = transition_noise(draw, spec, None)
    star = whiten(om, draw.sigma)
    quad = np.einsum("tqi,ij,tqj->tq", om, np.linalg.inv(draw.sigma), om)
    assert np.allclose((star ** 2).sum(axis=2), quad)


def test_w_posterior_no_data_is_prior():
    shape, rate = w_posterior(np.zeros((0, 1, 2)), HyperPrior(a=[30.0], b=[15.0]))
    assert shape[0] == 30.0 and rate[0] == 15.0


def test_w_update_one_dimensional_conjugacy(rng):
    spec, draw = _fixed_draw(rng, T=50, p=1)
    prior = HyperPrior(a=[3.0], b=[1.0])
    om = transition_noise(draw, spec, None)[:, 0, 0] / np.sqrt(draw.sigma[0, 0])
    shape, rate = 3.0 + 25.0, 1.0 + 0.5 * np.sum(om ** 2)
    w = np.array([gibbs_w_update(draw, spec, prior, rng_for(0, s))[0] for s in range(20_000)])
    assert abs(w.mean() - rate / (shape - 1)) <= 3 * w.std() / np.sqrt(w.size)


def test_gibbs_chain_reproducible_and_positive():
    data, truth = simulate(SimConfig(T_total=40, series_length=40, seed=2))
    prior = HyperPrior(a=[30.0], b=[15.0])
    a = gibbs_chain(truth["spec"], data, prior, 4, seed=3)
    b = gibbs_chain(truth["spec"], data, prior, 4, seed=3)
    assert np.array_equal(a.w, b.w) and np.array_equal(a.theta, b.theta)
    assert np.all(a.w > 0) and a.length == 4
    pm = gibbs_chain(truth["spec"], data, prior, 2, seed=3, point_mode=True)
    assert pm.point_mode and np.all(pm.w > 0)


def test_gibbs_requires_diagonal_w():
    data, truth = simulate(SimConfig(T_total=20, series_length=20, seed=2))
    spec = truth["spec"].replace(F=[1.0, 0.0], G=np.eye(2), W=[[1.0, 0.2], [0.2, 1.0]],
                                 M0=np.zeros((2, 2)), C0=np.eye(2))
    with pytest.raises(ValueError):
        gibbs_chain(spec, data, HyperPrior(a=[1, 1], b=[1, 1]), 2)


def test_gibbs_failure_keeps_partial_chain(monkeypatch):
    import mlndlm.samplers as samplers
    data, truth = simulate(SimConfig(T_total=20, series_length=20, seed=2))
    real = samplers.gibbs_w_update
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            raise np.linalg.LinAlgError("Sigma is not positive definite")
        return real(*args, **kw)

    monkeypatch.setattr(samplers, "gibbs_w_update", flaky)
    with pytest.raises(GibbsError) as exc:
        gibbs_chain(truth["spec"], data, HyperPrior(a=[30.0], b=[15.0]), 5)
    assert exc.value.iteration == 2 and exc.value.chain.length == 2


def test_ess_iid_and_limits():
    x = np.random.default_rng(0).standard_normal(10_000)
    assert abs(effective_sample_size(x) - 10_000) <= 1_000
    assert effective_sample_size(x) <= 10_000
    rep = ess_report(np.ones(50))
    assert rep["degenerate"] and rep["ess"] == 50
    with pytest.raises(ValueError):
        effective_sample_size([1.0])
