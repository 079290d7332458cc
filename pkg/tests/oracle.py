"""Brute-force reference computations for the test suite.

Everything here is built from the model definition directly (explicit
products of transition matrices, dense Gaussian conditioning) and never
calls the filter or smoother. The explicit prior matrix grows badly
conditioned with T, so these are only meant for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import multigammaln


@dataclass
class ExplicitPrior:
    """Marginal prior of eta^T given Sigma: rows ~ MN(B, A, Sigma).

    ``A`` is (n, n) over the kept (observed) columns, ``B`` is (n, p);
    ``columns`` lists which time indices were kept.
    """

    A: np.ndarray
    B: np.ndarray
    columns: np.ndarray


def _gprod(G, t, l):
    """G_t G_{t-1} ... G_l (identity when l > t)."""
    out = np.eye(G.shape[-1])
    for s in range(l, t + 1):
        out = G[s] @ out
    return out


def _series_prior(F, G, W, gamma, M0, C0):
    """Dense A and B for one series of length len(F) (0-based times)."""
    T = F.shape[0]
    A = np.empty((T, T))
    B = np.empty((T, M0.shape[1]))
    for t in range(T):
        Gt0 = _gprod(G, t, 0)
        B[t] = F[t] @ Gt0 @ M0
        for s in range(t + 1):
            Gs0 = _gprod(G, s, 0)
            inner = Gt0 @ C0 @ Gs0.T
            for l in range(s + 1):
                inner = inner + _gprod(G, t, l + 1) @ W[l] @ _gprod(G, s, l + 1).T
            A[t, s] = A[s, t] = F[t] @ inner @ F[s] + (gamma[t] if s == t else 0.0)
    return A, B


def explicit_prior_matrix(spec, T, observed=None, series_lengths=None):
    """Block-diagonal explicit prior over all series, missing columns dropped."""
    F, G, W, gamma = spec.expand(T)
    lengths = (T,) if series_lengths is None else tuple(series_lengths)
    obs = np.ones(T, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    A = np.zeros((T, T))
    B = np.zeros((T, spec.p))
    a = 0
    for k, n in enumerate(lengths):
        M0, C0 = spec.initial(k)
        sl = slice(a, a + n)
        A[sl, sl], B[sl] = _series_prior(F[sl], G[sl], W[sl], gamma[sl], M0, C0)
        a += n
    keep = np.flatnonzero(obs)
    return ExplicitPrior(A=A[np.ix_(keep, keep)], B=B[keep], columns=keep)


def joint_matrix_t_logdensity(prior, Xi0, nu0, eta):
    """log density of the observed columns of eta (p, T) under the matrix-T.

    Sigma ~ IW(Xi0, nu0) with E[Sigma] = Xi0 / (nu0 - p - 1).
    """
    E = np.asarray(eta, dtype=float)[:, prior.columns].T - prior.B  # (n, p)
    n, p = E.shape
    LA = np.linalg.cholesky(prior.A)  # raises when A is not PD
    Z = np.linalg.solve(LA, E)
    post = Xi0 + Z.T @ Z
    logdetA = 2.0 * np.sum(np.log(np.diag(LA)))
    _, logdet0 = np.linalg.slogdet(Xi0)
    _, logdetp = np.linalg.slogdet(post)
    return (multigammaln((nu0 + n) / 2, p) - multigammaln(nu0 / 2, p)
            - 0.5 * n * p * np.log(np.pi) - 0.5 * p * logdetA
            + 0.5 * nu0 * logdet0 - 0.5 * (nu0 + n) * logdetp)


def finite_difference_gradient(f, x, h=1e-5):
    """Central differences with step ``h * max(1, |x_i|)`` per component."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(flat.size):
        step = h * max(1.0, abs(flat[i]))
        xp, xm = flat.copy(), flat.copy()
        xp[i] += step
        xm[i] -= step
        gf[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * step)
    return g


def gaussian_state_posterior(spec, eta, observed=None):
    """Posterior of (Theta_0, ..., Theta_T) given eta for a single series, Q = 1.

    Builds the joint Gaussian of states and observed eta with unit Sigma and
    conditions densely. Returns ``(mean (T+1, p), cov (T+1, T+1), Xi_T,
    nu_T)``; given eta, Cov(Theta) = cov * E[Sigma | eta] with
    Sigma | eta ~ IW(Xi_T, nu_T).
    """
    eta = np.asarray(eta, dtype=float)
    p, T = eta.shape
    F, G, W, gamma = spec.expand(T)
    if spec.Q != 1:
        raise ValueError("oracle handles Q = 1 only")
    obs = np.ones(T, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    f, g, w, gm = F[:, 0], G[:, 0, 0], W[:, 0, 0], gamma
    # states x_j = Theta_j, j = 0..T as linear maps of (Theta_0, Omega_1..Omega_T)
    L = np.zeros((T + 1, T + 1))
    L[0, 0] = 1.0
    for j in range(1, T + 1):
        L[j] = g[j - 1] * L[j - 1]
        L[j, j] = 1.0
    base_cov = np.diag(np.concatenate([[spec.C0[0, 0]], w]))
    Kxx = L @ base_cov @ L.T
    mx = L[:, 0:1] * spec.M0[0][None, :]
    # eta_t = f_t Theta_t + v_t
    H = np.zeros((T, T + 1))
    H[np.arange(T), np.arange(1, T + 1)] = f
    Kyy = H @ Kxx @ H.T + np.diag(gm)
    Kxy = Kxx @ H.T
    my = H @ mx
    keep = np.flatnonzero(obs)
    Kyy, Kxy, my = Kyy[np.ix_(keep, keep)], Kxy[:, keep], my[keep]
    resid = eta[:, keep].T - my
    sol = np.linalg.solve(Kyy, resid)
    mean = mx + Kxy @ sol
    cov = Kxx - Kxy @ np.linalg.solve(Kyy, Kxy.T)
    Xi_T = spec.Xi0 + resid.T @ sol
    nu_T = spec.nu0 + keep.size
    return mean, cov, Xi_T, nu_T
