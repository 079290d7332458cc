"""Forward filtering over the latent log-ratios.

Of the filter quantities only the means (A, f, e, M) and the scale matrix Xi
depend on eta; the covariances (R, C), forecast scales q and gains S depend
on the model and the missingness layout alone. They are computed once by
:func:`covariance_pass` and reused by every mean pass, which may be batched
over any number of leading draw dimensions.

Series are concatenated along time. At each series start the state moments
reset to that series' (M0, C0) while (Xi, nu) carry over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .model import Layout


class FilterError(FloatingPointError):
    """Numerical failure inside the recursion; ``t`` is the offending column."""

    def __init__(self, message, t=None):
        self.t = t
        super().__init__(message if t is None else f"t={t}: {message}")


def _sym(X):
    return 0.5 * (X + np.swapaxes(X, -1, -2))


@dataclass(frozen=True, eq=False)
class Covariances:
    """Eta-independent part of the filter, stacked over time."""

    F: np.ndarray      # (T, Q)
    G: np.ndarray      # (T, Q, Q)
    W: np.ndarray      # (T, Q, Q)
    gamma: np.ndarray  # (T,)
    R: np.ndarray      # (T, Q, Q) prior state scale
    C: np.ndarray      # (T, Q, Q) posterior state scale
    q: np.ndarray      # (T,) forecast scale, defined on missing columns too
    S: np.ndarray      # (T, Q) gain, defined on missing columns too
    C0: np.ndarray     # (K, Q, Q)
    layout: Layout


def covariance_pass(spec, layout):
    layout = Layout.of(layout)
    T = layout.T
    F, G, W, gamma = spec.expand(T)
    Q = spec.Q
    R = np.empty((T, Q, Q))
    C = np.empty((T, Q, Q))
    q = np.empty(T)
    S = np.empty((T, Q))
    C0s = np.empty((len(layout.series_lengths), Q, Q))
    obs = layout.observed
    for k, (a, b) in enumerate(layout.bounds):
        Cprev = spec.initial(k)[1]
        C0s[k] = Cprev
        for t in range(a, b):
            Rt = _sym(G[t] @ Cprev @ G[t].T + W[t])
            Ft = F[t]
            RF = Rt @ Ft
            qt = gamma[t] + Ft @ RF
            if not np.isfinite(qt) or not np.all(np.isfinite(Rt)):
                raise FilterError("non-finite prior state scale", t)
            if qt <= 0:
                raise FilterError(f"forecast scale q={qt:.3g} is not positive", t)
            St = RF / qt
            R[t], q[t], S[t] = Rt, qt, St
            Cprev = _sym(Rt - qt * np.outer(St, St)) if obs[t] else Rt
            C[t] = Cprev
    return Covariances(F, G, W, np.asarray(gamma, dtype=float), R, C, q, S, C0s, layout)


def mean_pass(spec, cov, eta):
    """Propagate state means for one or many eta matrices.

    Parameters
    ----------
    eta : ndarray, shape (..., p, T)

    Returns
    -------
    A, M : ndarray (..., T, Q, p)
    f, e : ndarray (..., T, p); ``e`` is zero on missing columns
    """
    eta = np.asarray(eta, dtype=float)
    batch = eta.shape[:-2]
    p, T = eta.shape[-2:]
    layout = cov.layout
    if T != layout.T:
        raise ValueError(f"eta has {T} columns, layout has {layout.T}")
    Q = cov.G.shape[-1]
    A = np.empty(batch + (T, Q, p))
    M = np.empty(batch + (T, Q, p))
    f = np.empty(batch + (T, p))
    e = np.zeros(batch + (T, p))
    obs = layout.observed
    etaT = np.moveaxis(eta, -1, -2)
    G, F, S = cov.G, cov.F, cov.S
    for k, (a, b) in enumerate(layout.bounds):
        Mprev = np.broadcast_to(spec.initial(k)[0], batch + (Q, p))
        for t in range(a, b):
            At = G[t] @ Mprev
            ft = F[t] @ At
            A[..., t, :, :] = At
            f[..., t, :] = ft
            if obs[t]:
                et = etaT[..., t, :] - ft
                e[..., t, :] = et
                Mprev = At + S[t][:, None] * et[..., None, :]
            else:
                Mprev = At
            M[..., t, :, :] = Mprev
    return A, M, f, e


def scale_total(spec, cov, e):
    """Xi_T = Xi0 + sum_t e_t e_t^T / q_t, batched over leading dims of ``e``."""
    obs = cov.layout.observed
    es = e[..., obs, :]
    return spec.Xi0 + np.swapaxes(es / cov.q[obs][:, None], -1, -2) @ es


@dataclass(frozen=True, eq=False)
class FilterTrace:
    """Per-time filter quantities.

    Arrays are time-major. ``f, q, S, e`` are NaN on missing columns, where no
    forecast is scored. ``Xi[t]`` and ``nu[t]`` are the values *after* step
    t; ``Xi_T`` is the final scale summed with correctly rounded arithmetic,
    so it does not depend on the order of the series.
    """

    A: np.ndarray
    R: np.ndarray
    f: np.ndarray
    q: np.ndarray
    S: np.ndarray
    e: np.ndarray
    M: np.ndarray
    C: np.ndarray
    Xi: np.ndarray
    nu: np.ndarray
    Xi0: np.ndarray
    nu0: float
    Xi_T: np.ndarray
    nu_T: float
    M0: np.ndarray  # (K, Q, p) per-series initial means
    C0: np.ndarray  # (K, Q, Q)
    G: np.ndarray
    F: np.ndarray
    gamma: np.ndarray
    layout: Layout

    @property
    def T(self):
        return self.layout.T

    @property
    def observed(self):
        return self.layout.observed

    def xi_before(self, t):
        return self.Xi0 if t == 0 else self.Xi[t - 1]

    def nu_before(self, t):
        return self.nu0 if t == 0 else self.nu[t - 1]


def _exact_scale_total(Xi0, e, q, obs):
    p = Xi0.shape[0]
    out = np.empty((p, p))
    es = e[obs]
    qs = q[obs]
    for i in range(p):
        for j in range(i, p):
            terms = (es[:, i] * es[:, j]) / qs
            out[i, j] = out[j, i] = math.fsum([Xi0[i, j], *terms.tolist()])
    return out


def filter(spec, eta, layout=None, cov=None):
    """Run the forward filter for a single eta matrix of shape (p, T)."""
    eta = np.asarray(eta, dtype=float)
    if eta.ndim != 2 or eta.shape[0] != spec.p:
        raise ValueError(f"eta must have shape ({spec.p}, T), got {eta.shape}")
    layout = Layout.of(layout, T=eta.shape[1])
    if cov is None:
        cov = covariance_pass(spec, layout)
    bad = ~np.isfinite(eta[:, layout.observed])
    if np.any(bad):
        t = int(np.flatnonzero(layout.observed)[np.argmax(bad.any(axis=0))])
        raise FilterError("non-finite eta", t)
    A, M, f, e = mean_pass(spec, cov, eta)
    obs = layout.observed
    T = layout.T
    bad = ~np.all(np.isfinite(M), axis=(1, 2))
    if np.any(bad):
        raise FilterError("non-finite state mean", int(np.argmax(bad)))

    inc = np.zeros((T, spec.p, spec.p))
    inc[obs] = e[obs][:, :, None] * e[obs][:, None, :] / cov.q[obs][:, None, None]
    Xi = _sym(spec.Xi0 + np.cumsum(inc, axis=0))
    nu = spec.nu0 + np.cumsum(obs).astype(float)

    nan_missing = lambda x: np.where(obs.reshape((T,) + (1,) * (x.ndim - 1)), x, np.nan)
    K = len(layout.series_lengths)
    return FilterTrace(
        A=A, R=cov.R, f=nan_missing(f), q=nan_missing(cov.q), S=nan_missing(cov.S),
        e=nan_missing(e), M=M, C=cov.C, Xi=Xi, nu=nu,
        Xi0=spec.Xi0, nu0=spec.nu0,
        Xi_T=_exact_scale_total(spec.Xi0, e, cov.q, obs),
        nu_T=float(spec.nu0 + obs.sum()),
        M0=np.stack([spec.initial(k)[0] for k in range(K)]),
        C0=cov.C0, G=cov.G, F=cov.F, gamma=cov.gamma, layout=layout,
    )


def filter_missing_step(A, R, Xi_prev, nu_prev):
    """Posterior equals prior on a missing column: (M, C, Xi, nu)."""
    return A, R, Xi_prev, nu_prev


def forecast(trace, t):
    """One-step forecast location and scale at column ``t`` (any column)."""
    f = trace.A[t].T @ trace.F[t]
    q = trace.gamma[t] + trace.F[t] @ trace.R[t] @ trace.F[t]
    return f, q


def t_logdensity(e, q, Xi_prev, nu_prev):
    """Log density of the one-step Student-t forecast.

    ``eta_t | past`` is multivariate t with ``nu_prev - p + 1`` degrees of
    freedom, location ``f_t`` and scale ``q_t Xi_prev / (nu_prev - p + 1)``.
    Vectorized over leading dimensions of ``e``/``Xi_prev``.
    """
    e = np.asarray(e, dtype=float)
    p = e.shape[-1]
    L = np.linalg.cholesky(Xi_prev)
    z = np.linalg.solve(L, e[..., None])[..., 0]
    quad = np.sum(z * z, axis=-1) / q
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return (
        gammaln((nu_prev + 1) / 2) - gammaln((nu_prev - p + 1) / 2)
        - 0.5 * p * math.log(math.pi) - 0.5 * p * np.log(q) - 0.5 * logdet
        - 0.5 * (nu_prev + 1) * np.log1p(quad)
    )


def step_logdensities(trace):
    """Per-column log p(eta_t | earlier columns); zero on missing columns."""
    obs = trace.observed
    out = np.zeros(trace.T)
    if not obs.any():
        return out
    Xi_prev = np.concatenate([trace.Xi0[None], trace.Xi[:-1]])
    nu_prev = np.concatenate([[trace.nu0], trace.nu[:-1]])
    out[obs] = t_logdensity(trace.e[obs], trace.q[obs], Xi_prev[obs], nu_prev[obs])
    return out


def log_prior_eta(spec, eta, layout=None):
    """log p(eta) as the sum of one-step Student-t forecast densities."""
    return float(step_logdensities(filter(spec, eta, layout)).sum())
