"""Backward sampling of (Theta, Sigma) given eta.

Sigma is drawn from its inverse-Wishart posterior IW(Xi_T, nu_T), then each
series is sampled backward from its last column using the stored filter
moments. The gains Z_t and conditional scales C*_t do not depend on eta or
Sigma, so :class:`BackwardPlan` factors them once and the same plan serves
every draw.

Randomness comes from counter-based Philox streams keyed by
``(seed, draw_index)``, so a draw is reproducible on its own, independent of
how draws are batched or scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class SmootherError(np.linalg.LinAlgError):
    def __init__(self, message, t=None):
        self.t = t
        super().__init__(message if t is None else f"t={t}: {message}")


def rng_for(seed, *keys):
    """Philox generator for ``seed`` and an optional spawn path ``keys``."""
    if isinstance(seed, np.random.Generator) and not keys:
        return seed
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + keys)
    else:
        ss = np.random.SeedSequence(seed, spawn_key=keys)
    return np.random.Generator(np.random.Philox(ss))


def _sym(X):
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def psd_factor(X):
    """Square-root factor L with L L^T = X for symmetric PSD X.

    Cholesky when X is positive definite; otherwise eigenvalues are clipped
    at zero.
    """
    X = np.asarray(X, dtype=float)
    try:
        return np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(_sym(X))
        return V * np.sqrt(np.clip(w, 0.0, None))


def _require_symmetric(X, name, tol=1e-8):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValueError(f"{name} must be square, got {X.shape}")
    scale = max(1.0, float(np.max(np.abs(X)))) if X.size else 1.0
    if np.max(np.abs(X - X.T)) > tol * scale:
        raise ValueError(f"{name} is not symmetric")
    return X


def sample_matrix_normal(M, U, V, seed=None, size=None):
    """Draw from MN(M, U, V): row covariance U, column covariance V.

    ``vec(X)`` has covariance ``V kron U``.
    """
    M = np.asarray(M, dtype=float)
    LU = psd_factor(_require_symmetric(U, "U"))
    LV = psd_factor(_require_symmetric(V, "V"))
    rng = rng_for(seed)
    shape = M.shape if size is None else (size,) + M.shape
    Z = rng.standard_normal(shape)
    return M + LU @ Z @ LV.T


def bartlett_factor(Xi_chol, nu, chi2, normals):
    """Factor B with B B^T ~ IW(Xi, nu) from Bartlett variates.

    With Xi = U U^T and A the Bartlett matrix of a Wishart(I, nu),
    ``U^{-T} A A^T U^{-1}`` is Wishart(Xi^{-1}, nu); its inverse factors as
    ``(U A^{-T})(U A^{-T})^T``. Batched over leading dims of ``chi2``.
    """
    p = Xi_chol.shape[-1]
    batch = chi2.shape[:-1]
    A = np.zeros(batch + (p, p))
    idx = np.arange(p)
    A[..., idx, idx] = np.sqrt(chi2)
    lo = np.tril_indices(p, -1)
    A[..., lo[0], lo[1]] = normals
    Ainv = np.linalg.solve(A, np.broadcast_to(np.eye(p), A.shape))
    return Xi_chol @ np.swapaxes(Ainv, -1, -2)


def _bartlett_variates(rng, p, nu):
    chi2 = rng.chisquare(nu - np.arange(p))
    normals = rng.standard_normal(p * (p - 1) // 2)
    return chi2, normals


def sample_inverse_wishart(Xi, nu, seed=None, size=None, return_factor=False):
    """Draw Sigma ~ IW(Xi, nu) with E[Sigma] = Xi / (nu - p - 1).

    Uses the Bartlett decomposition of a Wishart on Xi^{-1} and inverts it
    in factored form.
    """
    Xi = _require_symmetric(Xi, "Xi")
    p = Xi.shape[0]
    if not nu > p - 1:
        raise ValueError(f"inverse-Wishart needs nu > p - 1 = {p - 1}, got {nu}")
    rng = rng_for(seed)
    U = np.linalg.cholesky(_sym(Xi))
    n = 1 if size is None else size
    variates = [_bartlett_variates(rng, p, nu) for _ in range(n)]
    chi2 = np.array([v[0] for v in variates])
    normals = np.array([v[1] for v in variates])
    B = bartlett_factor(U, nu, chi2, normals)
    Sigma = _sym(B @ np.swapaxes(B, -1, -2))
    if size is None:
        Sigma, B = Sigma[0], B[0]
    return (Sigma, B) if return_factor else Sigma


@dataclass(frozen=True)
class StateDraw:
    """One joint draw. ``theta`` is (T, Q, p); ``theta0`` is (K, Q, p)."""

    theta: np.ndarray
    theta0: np.ndarray
    sigma: np.ndarray


class BackwardPlan:
    """Eta-independent gains and factors for backward sampling."""

    COND_LIMIT = 1e13

    def __init__(self, C, R, G, C0, layout):
        self.layout = layout
        self.G = G
        T, Q = C.shape[0], C.shape[-1]
        self.Q = Q
        self.Z = np.zeros((T, Q, Q))
        self.L = np.empty((T, Q, Q))
        K = len(layout.series_lengths)
        self.Z0 = np.empty((K, Q, Q))
        self.L0 = np.empty((K, Q, Q))
        for k, (a, b) in enumerate(layout.bounds):
            self.L[b - 1] = psd_factor(_sym(C[b - 1]))
            for t in range(b - 2, a - 2, -1):
                Ct = C0[k] if t < a else C[t]
                Zt, Lt = self._gain(Ct, G[t + 1], R[t + 1], t + 1)
                if t < a:
                    self.Z0[k], self.L0[k] = Zt, Lt
                else:
                    self.Z[t], self.L[t] = Zt, Lt

    def _gain(self, Ct, Gn, Rn, t_next):
        try:
            fac = cho_factor(Rn, lower=True)
        except np.linalg.LinAlgError:
            fac = None
        cond = np.linalg.cond(Rn)
        if fac is None or not np.isfinite(cond) or cond > self.COND_LIMIT:
            raise SmootherError(f"prior scale R is numerically singular (condition {cond:.3g})", t_next)
        Zt = cho_solve(fac, Gn @ Ct).T  # C G^T R^{-1}, R symmetric
        Cstar = _sym(Ct - Zt @ Rn @ Zt.T)
        return Zt, psd_factor(Cstar)

    @classmethod
    def from_trace(cls, trace):
        return cls(trace.C, trace.R, trace.G, trace.C0, trace.layout)

    @property
    def noise_shape(self):
        return (self.layout.T + len(self.layout.series_lengths), self.Q)

    def sample(self, M, A, M0, B, noise):
        """Backward pass for a batch of draws.

        M, A : (S, T, Q, p) filter means per draw
        M0 : (K, Q, p)
        B : (S, p, p) factor of Sigma per draw
        noise : (S, T + K, Q, p) standard normals; column T + k seeds theta0 of
            series k
        """
        S, T = M.shape[0], M.shape[1]
        theta = np.empty(M.shape)
        K = len(self.layout.series_lengths)
        theta0 = np.empty((S, K) + M.shape[2:])
        Bt = np.swapaxes(B, -1, -2)
        for k, (a, b) in enumerate(self.layout.bounds):
            nxt = M[:, b - 1] + self.L[b - 1] @ noise[:, b - 1] @ Bt
            theta[:, b - 1] = nxt
            for t in range(b - 2, a - 1, -1):
                nxt = M[:, t] + self.Z[t] @ (nxt - A[:, t + 1]) + self.L[t] @ noise[:, t] @ Bt
                theta[:, t] = nxt
            theta0[:, k] = M0[k] + self.Z0[k] @ (nxt - A[:, a]) + self.L0[k] @ noise[:, T + k] @ Bt
        return theta, theta0


def draw_variates(rng, p, nu, noise_shape):
    """All random inputs of one uncollapse draw, in a fixed order."""
    chi2, normals = _bartlett_variates(rng, p, nu)
    return chi2, normals, rng.standard_normal(noise_shape + (p,))


def smooth_draw(spec, trace, rng_seed, plan=None):
    """One joint draw of (Sigma, Theta) given the filter trace of a fixed eta."""
    plan = BackwardPlan.from_trace(trace) if plan is None else plan
    p = trace.Xi0.shape[0]
    rng = rng_for(rng_seed)
    chi2, normals, noise = draw_variates(rng, p, trace.nu_T, plan.noise_shape)
    U = np.linalg.cholesky(_sym(trace.Xi_T))
    B = bartlett_factor(U, trace.nu_T, chi2[None], normals[None])
    theta, theta0 = plan.sample(trace.M[None], trace.A[None], trace.M0, B, noise[None])
    sigma = _sym(B[0] @ B[0].T)
    return StateDraw(theta=theta[0], theta0=theta0[0], sigma=sigma)
