import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import random_counts, random_spec
from oracle import explicit_prior_matrix, joint_matrix_t_logdensity

from mlndlm.filter import (FilterError, covariance_pass, filter, filter_missing_step,
                           forecast, log_prior_eta, step_logdensities)
from mlndlm.model import Layout, ModelSpec, builtin_random_walk


def straight_line_filter(spec, eta, observed, lengths):
    """Plain loop over the recursion, written without the batched machinery."""
    F, G, W, gamma = spec.expand(eta.shape[1])
    Xi, nu = spec.Xi0.copy(), spec.nu0
    t = 0
    for k, n in enumerate(lengths):
        M, C = spec.initial(k)
        for _ in range(n):
            A = G[t] @ M
            R = G[t] @ C @ G[t].T + W[t]
            if observed[t]:
                f = A.T @ F[t]
                q = gamma[t] + F[t] @ R @ F[t]
                S = R @ F[t] / q
                e = eta[:, t] - f
                M = A + np.outer(S, e)
                C = R - q * np.outer(S, S)
                Xi = Xi + np.outer(e, e) / q
                nu += 1
            else:
                M, C = A, R
            t += 1
    return Xi, nu


def test_one_step_closed_form():
    m, c, w, x = 0.4, 0.7, 0.3, 1.3
    spec = ModelSpec(F=[1.0], G=[[1.0]], W=[[w]], gamma=1.0, M0=[[m]], C0=[[c]], Xi0=[[1.0]], nu0=3.0)
    tr = filter(spec, np.array([[x]]))
    assert tr.f[0, 0] == pytest.approx(m)
    assert tr.q[0] == pytest.approx(1 + c + w)
    assert tr.M[0, 0, 0] == pytest.approx(m + (c + w) * (x - m) / (1 + c + w))


def test_all_missing_series_is_prior_propagation():
    spec = builtin_random_walk(3, 5, 0.5, C0=2.0)
    tr = filter(spec, np.zeros((2, 5)), Layout(np.zeros(5, dtype=bool), (5,)))
    assert tr.nu_T == spec.nu0
    assert np.array_equal(tr.Xi_T, spec.Xi0)
    assert np.allclose(tr.C[:, 0, 0], 2.0 + 0.5 * np.arange(1, 6))
    assert np.all(np.isnan(tr.e)) and np.all(np.isnan(tr.f))


def test_matches_straight_line_reimplementation(rng):
    spec = random_spec(rng, 3, 2, K=2)
    data = random_counts(rng, 3, 12, missing=0.25, series_lengths=(5, 7))
    eta = rng.normal(size=(2, 12))
    tr = filter(spec, eta, Layout.of(data))
    Xi, nu = straight_line_filter(spec, eta, data.observed, data.series_lengths)
    assert np.allclose(tr.Xi_T, Xi, rtol=1e-12)
    assert tr.nu_T == nu


def test_missing_step_equals_two_step_prior():
    w, c = 0.3, 0.5
    spec = ModelSpec(F=[1.0], G=[[1.0]], W=[[w]], gamma=1.0, M0=[[0.0]], C0=[[c]], Xi0=[[1.0]], nu0=4.0)
    eta = np.array([[0.2, 9.9, -0.4]])
    tr = filter(spec, eta, Layout(np.array([True, False, True]), (3,)))
    # step 2 is missing: R_3 = C_1 + 2 w, A_3 = M_1
    C1 = tr.C[0, 0, 0]
    assert tr.R[2, 0, 0] == pytest.approx(C1 + 2 * w)
    assert np.allclose(tr.A[2], tr.M[0])
    assert tr.nu[1] == tr.nu[0]
    M, C, Xi, nu = filter_missing_step(tr.A[1], tr.R[1], tr.Xi[0], tr.nu[0])
    assert np.array_equal(M, tr.M[1]) and np.array_equal(Xi, tr.Xi[1])


def test_scalar_t_density():
    spec = ModelSpec(F=[1.0], G=[[1.0]], W=[[0.4]], gamma=1.0, M0=[[0.1]], C0=[[0.6]], Xi0=[[1.7]], nu0=4.5)
    x = 0.8
    q = 1 + 0.6 + 0.4
    dof = spec.nu0  # nu0 - p + 1 with p = 1
    scale = np.sqrt(q * 1.7 / dof)
    want = stats.t(dof, loc=0.1, scale=scale).logpdf(x)
    assert log_prior_eta(spec, np.array([[x]])) == pytest.approx(want, rel=1e-12)


def test_missing_point_golden():
    spec = builtin_random_walk(3, 4, 0.45, M0=0.2)
    eta = np.array([[0.1, 0.3, -0.2, 0.5], [0.0, -0.4, 0.2, 0.1]])
    full = log_prior_eta(spec, eta)
    gap = log_prior_eta(spec, eta, Layout(np.array([True, False, True, True]), (4,)))
    oracle = joint_matrix_t_logdensity(
        explicit_prior_matrix(spec, 4, [True, False, True, True]), spec.Xi0, spec.nu0, eta)
    assert gap == pytest.approx(oracle, rel=1e-12)
    assert gap == pytest.approx(-3.6357843824433207, rel=1e-12)
    assert gap != full


def test_forecast_consistent_with_trace(rng):
    spec = random_spec(rng, 3, 2)
    tr = filter(spec, rng.normal(size=(2, 6)))
    for t in range(6):
        f, q = forecast(tr, t)
        assert np.allclose(f, tr.f[t]) and q == pytest.approx(tr.q[t])


def test_step_densities_sum(rng):
    spec = random_spec(rng, 4, 1)
    eta = rng.normal(size=(3, 5))
    tr = filter(spec, eta)
    assert step_logdensities(tr).sum() == pytest.approx(log_prior_eta(spec, eta))


def test_non_finite_eta_names_column():
    spec = builtin_random_walk(3, 4, 0.45)
    eta = np.zeros((2, 4))
    eta[1, 2] = np.nan
    with pytest.raises(FilterError) as exc:
        filter(spec, eta)
    assert exc.value.t == 2


def test_nonpositive_q_is_fatal():
    spec = builtin_random_walk(2, 3, 0.45).replace(gamma=-5.0)
    with pytest.raises(FilterError):
        covariance_pass(spec, Layout(np.ones(3, dtype=bool), (3,)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(1, 2), st.integers(1, 15))
def test_trace_invariants(seed, D, Q, T):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, D, Q)
    data = random_counts(rng, D, T, missing=0.3)
    tr = filter(spec, rng.normal(size=(D - 1, T)), Layout.of(data))
    gamma = spec.expand(T)[3]
    obs = data.observed
    assert np.all(tr.q[obs] >= gamma[obs])
    for t in range(T):
        assert np.min(np.linalg.eigvalsh(tr.R[t] - tr.C[t])) >= -1e-9
        assert np.allclose(tr.C[t], tr.C[t].T, atol=1e-9)
        np.linalg.cholesky(tr.Xi[t])
        step = tr.Xi[t] - tr.xi_before(t)
        if obs[t]:
            assert np.linalg.matrix_rank(step, tol=1e-9 * max(1, np.abs(step).max())) <= 1
            assert np.min(np.linalg.eigvalsh(step)) >= -1e-9
        else:
            assert np.array_equal(step, np.zeros_like(step))
    assert tr.nu_T == spec.nu0 + obs.sum()
