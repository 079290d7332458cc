"""Collapsed negative log posterior of eta and its exact gradient.

The prior term is scored with the forward filter. Because the one-step
forecast densities telescope,

    log p(eta) = sum_t c_t + nu0/2 log|Xi0| - nu_T/2 log|Xi_T|,

with ``c_t`` independent of eta and ``Xi_T = Xi0 + sum_t e_t e_t^T / q_t``.
Every dependence on eta therefore runs through the innovations ``e_t``,
which are affine in eta via the state-mean recursion. The gradient is the
direct term ``-nu_T Xi_T^{-1} e_t / q_t`` pulled back through that
recursion with a single backward sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln

from .filter import covariance_pass, mean_pass
from .model import Layout, check


@dataclass(frozen=True)
class ObjectiveValue:
    neg_log_post: float
    grad: np.ndarray       # (p, T), gradient of neg_log_post
    term_loglik: float
    term_logprior: float


def multinomial_loglik(eta, Y, observed=None, constants=True):
    """Multinomial log likelihood of counts under ``alr_inverse(eta)``.

    Returns ``(value, gradient)`` with gradient of shape ``(p, T)``. Missing
    columns contribute nothing. With ``constants=True`` the multinomial
    coefficients are included in the value.
    """
    eta = np.asarray(eta, dtype=float)
    Y = np.asarray(Y, dtype=float)
    T = eta.shape[1]
    obs = np.ones(T, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    n = Y.sum(axis=0)
    top = np.maximum(eta.max(axis=0), 0.0)
    ex = np.exp(eta - top)
    denom = ex.sum(axis=0) + np.exp(-top)
    log_m = top + np.log(denom)  # log(1 + sum_i exp(eta_i))
    rho = ex / denom
    percol = (eta * Y[:-1]).sum(axis=0) - n * log_m
    if constants:
        percol = percol + gammaln(n + 1) - gammaln(Y + 1).sum(axis=0)
    value = float(percol[obs].sum())
    grad = (Y[:-1] - n * rho) * obs
    return value, grad


def t_prior_grad_step(eta_t, f_t, q_t, Xi_prev, nu_prev):
    """Gradient of log p(eta_t | past) in eta_t, holding f_t and Xi_prev fixed.

    With ``X = q_t Xi_prev`` and ``L = 1 + e^T X^{-1} e`` this is
    ``-(nu_prev + 1) X^{-1} e / L``; the solve goes through a Cholesky factor.
    """
    e = np.asarray(eta_t, dtype=float) - np.asarray(f_t, dtype=float)
    try:
        factor = cho_factor(q_t * np.asarray(Xi_prev, dtype=float), lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Xi_prev is not positive definite") from exc
    Xe = cho_solve(factor, e)
    L = 1.0 + e @ Xe
    return -(nu_prev + 1.0) * Xe / L


class CollapsedObjective:
    """-log p(eta | Y) for a fixed model and dataset.

    The eta-independent filter pass and all constants are computed once at
    construction; each call costs one forward and one backward sweep.

    ``share_scale=False`` gives each series its own Sigma prior (Xi and nu
    restart at every series start). It exists for diagnostics; the model
    shares Sigma across series.
    """

    def __init__(self, spec, data, share_scale=True):
        check(spec, data)
        self.spec = spec
        self.data = data
        self.layout = Layout.of(data)
        self.cov = covariance_pass(spec, self.layout)
        self.p = spec.p
        self.T = data.T
        obs = self.layout.observed
        self.observed = obs
        self.Y = np.asarray(data.Y, dtype=float)
        if share_scale:
            self.groups = np.zeros(self.T, dtype=int)
        else:
            self.groups = np.repeat(np.arange(data.K), data.series_lengths)
        self.n_groups = int(self.groups.max()) + 1
        p = self.p
        nu_prev = np.empty(self.T)
        for g in range(self.n_groups):
            idx = np.flatnonzero(self.groups == g)
            seen = np.concatenate([[0], np.cumsum(obs[idx])[:-1]])
            nu_prev[idx] = spec.nu0 + seen
        self.nu_T = np.array([spec.nu0 + obs[self.groups == g].sum() for g in range(self.n_groups)])
        c = (gammaln((nu_prev + 1) / 2) - gammaln((nu_prev - p + 1) / 2)
             - 0.5 * p * math.log(math.pi) - 0.5 * p * np.log(self.cov.q))
        _, logdet0 = np.linalg.slogdet(spec.Xi0)
        self.prior_const = float(c[obs].sum()) + 0.5 * spec.nu0 * logdet0 * self.n_groups

    @property
    def size(self):
        return self.p * self.T

    def __call__(self, eta):
        eta = np.asarray(eta, dtype=float).reshape(self.p, self.T)
        loglik, g_lik = multinomial_loglik(eta, self.Y, self.observed)
        logprior, g_prior = self._prior(eta)
        return ObjectiveValue(
            neg_log_post=-(loglik + logprior),
            grad=-(g_lik + g_prior),
            term_loglik=loglik,
            term_logprior=logprior,
        )

    def fun_grad(self, x):
        """Flat interface for optimizers: ``(value, gradient)`` on a vector."""
        v = self(x)
        return v.neg_log_post, v.grad.ravel()

    def _prior(self, eta):
        spec, cov, obs = self.spec, self.cov, self.observed
        _, _, _, e = mean_pass(spec, cov, eta)
        value = self.prior_const
        ebar = np.zeros_like(e)
        for g in range(self.n_groups):
            sel = obs & (self.groups == g)
            es = e[sel]
            qs = cov.q[sel]
            XiT = spec.Xi0 + (es / qs[:, None]).T @ es
            try:
                factor = cho_factor(XiT, lower=True)
            except np.linalg.LinAlgError as exc:
                raise FloatingPointError("accumulated scale matrix lost positive definiteness") from exc
            logdet = 2.0 * np.log(np.diag(factor[0])).sum()
            value -= 0.5 * self.nu_T[g] * logdet
            ebar[sel] = -self.nu_T[g] * cho_solve(factor, es.T).T / qs[:, None]
        return value, self._pullback(ebar)

    def _pullback(self, ebar):
        """Map adjoints of the innovations e_t to the gradient in eta.

        Forward: e_t = eta_t - A_t^T F_t, A_t = G_t M_{t-1},
        M_t = A_t + S_t e_t^T (M_t = A_t on missing columns).
        """
        cov, obs = self.cov, self.observed
        G, F, S = cov.G, cov.F, cov.S
        grad = np.zeros((self.p, self.T))
        for a, b in self.layout.bounds:
            Mbar = np.zeros((G.shape[-1], self.p))
            for t in range(b - 1, a - 1, -1):
                if obs[t]:
                    et_bar = ebar[t] + Mbar.T @ S[t]
                    grad[:, t] = et_bar
                    Abar = Mbar - np.outer(F[t], et_bar)
                else:
                    Abar = Mbar
                Mbar = G[t].T @ Abar
        return grad


def evaluate(spec, data, eta):
    """One-shot evaluation of the collapsed objective at ``eta`` (p x T)."""
    return CollapsedObjective(spec, data)(eta)
