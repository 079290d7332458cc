"""Posterior sampling: Dirichlet bootstraps over eta, the collapse-uncollapse
pipeline, a blocked Gibbs sampler for diagonal state variances, and ESS.

Every draw ``s`` owns the Philox stream ``rng_for(seed, s)`` and consumes it
in a fixed order (Dirichlet gammas, missing-column forecast variates,
Bartlett variates, backward-pass normals). Draws are processed in blocks of
fixed size, so the output is the same whatever the number of worker threads.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .compositional import alr_inverse, alr_to_clr
from .filter import covariance_pass, filter, mean_pass, scale_total
from .model import Layout, check
from .objective import CollapsedObjective
from .optimize import OptimizerConfig, map_estimate
from .smoother import (BackwardPlan, StateDraw, bartlett_factor, draw_variates,
                       rng_for, smooth_draw)

log = logging.getLogger(__name__)

BLOCK_SIZE = 64


@dataclass
class DMDBConfig:
    alpha: float | list = 0.5
    num_samples: int = 2000
    seed: int = 0

    def __post_init__(self):
        problems = []
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if alpha.ndim != 1 or not np.all(alpha > 0):
            problems.append("alpha must be positive (scalar or length-D vector)")
        if int(self.num_samples) != self.num_samples or self.num_samples < 1:
            problems.append("num_samples must be a positive integer")
        if problems:
            raise ValueError("; ".join(problems))
        self.num_samples = int(self.num_samples)

    def alpha_for(self, D):
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.ndim == 0:
            return np.full(D, float(alpha))
        if alpha.shape != (D,):
            raise ValueError(f"alpha has length {alpha.size}, data has D={D}")
        return alpha

    def to_dict(self):
        d = asdict(self)
        d["alpha"] = np.asarray(self.alpha, dtype=float).tolist()
        return d


class PipelineError(RuntimeError):
    """Some draws failed; ``failures`` maps draw index to message."""

    def __init__(self, failures):
        self.failures = dict(failures)
        head = ", ".join(f"{s}: {m}" for s, m in list(self.failures.items())[:5])
        more = "" if len(self.failures) <= 5 else f" (+{len(self.failures) - 5} more)"
        super().__init__(f"{len(self.failures)} draw(s) failed: {head}{more}")


def _log_gamma_ratio(g):
    """alr of a Dirichlet draw computed from its gamma variates."""
    lg = np.log(np.maximum(g, np.finfo(float).tiny))
    return lg[:-1] - lg[-1]


class DirichletBootstrap:
    """Per-column Dirichlet draws of eta around a MAP estimate.

    Observed column t draws ``pi ~ Dirichlet(alr_inverse(eta_hat_t) n_t +
    alpha)`` and returns ``alr(pi)``; the implied multinomial likelihood with
    pseudo-counts ``alr_inverse(eta_hat_t) n_t`` peaks at ``eta_hat_t``.
    Missing columns are drawn from the one-step Student-t forecast of the
    filter run at ``eta_hat`` (needs ``spec``).
    """

    def __init__(self, eta_hat, data, alpha=0.5, spec=None, trace=None):
        self.p, self.T = data.D - 1, data.T
        eta_hat = np.asarray(eta_hat, dtype=float)
        if eta_hat.shape != (self.p, self.T):
            raise ValueError(f"eta_hat must have shape {(self.p, self.T)}, got {eta_hat.shape}")
        alpha = DMDBConfig(alpha=alpha).alpha_for(data.D)
        obs = np.asarray(data.observed, dtype=bool)
        self.obs_idx = np.flatnonzero(obs)
        self.miss_idx = np.flatnonzero(~obs)
        pi_hat = alr_inverse(eta_hat[:, obs], axis=0)
        self.concentration = pi_hat * data.totals[obs] + alpha[:, None]
        self.eta_hat = eta_hat
        if self.miss_idx.size:
            if trace is None:
                if spec is None:
                    raise ValueError("data has missing columns; pass spec to fill them")
                trace = filter(spec, eta_hat, Layout.of(data))
            t = self.miss_idx
            self.f_miss = np.einsum("tqp,tq->tp", trace.A[t], trace.F[t])
            q = trace.gamma[t] + np.einsum("ti,tij,tj->t", trace.F[t], trace.R[t], trace.F[t])
            xi_prev = np.stack([trace.xi_before(i) for i in t])
            nu_prev = np.array([trace.nu_before(i) for i in t])
            self.dof_miss = nu_prev - self.p + 1
            self.chol_miss = np.linalg.cholesky(q[:, None, None] * xi_prev)

    def draw(self, rng):
        """One eta matrix (p, T) from the generator ``rng``."""
        eta = np.empty((self.p, self.T))
        g = rng.standard_gamma(self.concentration)
        eta[:, self.obs_idx] = _log_gamma_ratio(g)
        if self.miss_idx.size:
            z = rng.standard_normal((self.miss_idx.size, self.p))
            chi2 = rng.chisquare(self.dof_miss)
            dev = (self.chol_miss @ z[..., None])[..., 0] / np.sqrt(chi2)[:, None]
            eta[:, self.miss_idx] = (self.f_miss + dev).T
        return eta


def dmdb_sample_eta(eta_hat, data, config=None, spec=None):
    """Debiased Dirichlet bootstrap draws of eta, shape (S, p, T)."""
    config = DMDBConfig() if config is None else config
    boot = DirichletBootstrap(eta_hat, data, config.alpha, spec=spec)
    return np.stack([boot.draw(rng_for(config.seed, s)) for s in range(config.num_samples)])


def mdb_sample_eta(data, config=None):
    """Plain Dirichlet bootstrap ``Dirichlet(Y_t + alpha)``; NaN on missing columns."""
    config = DMDBConfig() if config is None else config
    alpha = config.alpha_for(data.D)
    obs = np.asarray(data.observed, dtype=bool)
    conc = np.asarray(data.Y, dtype=float)[:, obs] + alpha[:, None]
    out = np.full((config.num_samples, data.D - 1, data.T), np.nan)
    for s in range(config.num_samples):
        out[s][:, obs] = _log_gamma_ratio(rng_for(config.seed, s).standard_gamma(conc))
    return out


def interval_summary(x, axis=0, level=0.95):
    """Mean and central interval along ``axis``."""
    lo = (1 - level) / 2
    return {
        "mean": np.mean(x, axis=axis),
        "lower": np.quantile(x, lo, axis=axis),
        "upper": np.quantile(x, 1 - lo, axis=axis),
    }


@dataclass
class PosteriorDraws:
    """Joint posterior draws.

    eta: (S, p, T); theta: (S, Q, p, T); theta0: (S, K, Q, p);
    sigma: (S, p, p); w: (S, Q) or None.
    """

    eta: np.ndarray
    theta: np.ndarray
    theta0: np.ndarray
    sigma: np.ndarray
    w: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    @property
    def num_samples(self):
        return self.eta.shape[0]

    def theta_clr(self):
        return alr_to_clr(self.theta, axis=2)

    def summary(self, coords="clr", level=0.95):
        """Per-cell mean and interval for eta and theta."""
        if coords == "clr":
            eta, theta = alr_to_clr(self.eta, axis=1), self.theta_clr()
        elif coords == "alr":
            eta, theta = self.eta, self.theta
        else:
            raise ValueError(f"unknown coordinates {coords!r}")
        return {"eta": interval_summary(eta, level=level), "theta": interval_summary(theta, level=level)}


def _uncollapse_block(spec, cov, plan, boot, seed, draws, nu_T, M0):
    """Draw (eta, Theta, Sigma) for the draw indices ``draws``."""
    p = spec.p
    n = len(draws)
    eta = np.empty((n, p, cov.layout.T))
    chi2 = np.empty((n, p))
    normals = np.empty((n, p * (p - 1) // 2))
    noise = np.empty((n,) + plan.noise_shape + (p,))
    for i, s in enumerate(draws):
        rng = rng_for(seed, s)
        eta[i] = boot.draw(rng)
        chi2[i], normals[i], noise[i] = draw_variates(rng, p, nu_T, plan.noise_shape)
    A, M, _, e = mean_pass(spec, cov, eta)
    Xi_T = scale_total(spec, cov, e)
    Xi_T = 0.5 * (Xi_T + np.swapaxes(Xi_T, -1, -2))
    failures = {}
    U = np.empty_like(Xi_T)
    for i, s in enumerate(draws):
        try:
            U[i] = np.linalg.cholesky(Xi_T[i])
        except np.linalg.LinAlgError:
            failures[s] = "accumulated scale matrix is not positive definite"
            U[i] = np.eye(p)
    B = bartlett_factor(U, nu_T, chi2, normals)
    theta, theta0 = plan.sample(M, A, M0, B, noise)
    sigma = B @ np.swapaxes(B, -1, -2)
    sigma = 0.5 * (sigma + np.swapaxes(sigma, -1, -2))
    bad = ~np.all(np.isfinite(theta.reshape(n, -1)), axis=1)
    for i in np.flatnonzero(bad):
        failures.setdefault(draws[i], "non-finite state draw")
    return eta, theta, theta0, sigma, failures


def cu_pipeline(spec, data, config=None, opt_config=None, map_result=None, threads=1,
                block_size=BLOCK_SIZE):
    """MAP, Dirichlet bootstrap over eta, then an exact (Theta, Sigma) draw per eta.

    Parameters
    ----------
    config : DMDBConfig
    opt_config : OptimizerConfig, optional
    map_result : OptimizationResult, optional
        Reuse an existing MAP fit instead of optimizing.
    threads : int
        Worker threads over draw blocks; does not affect the output.

    Returns
    -------
    PosteriorDraws
        ``metadata`` records the MAP diagnostics, timings and whether missing
        columns were filled from the forecast distribution.
    """
    config = DMDBConfig() if config is None else config
    check(spec, data)
    timing = {}
    t0 = time.perf_counter()
    if map_result is None:
        map_result = map_estimate(spec, data, opt_config or OptimizerConfig())
    timing["map"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    layout = Layout.of(data)
    cov = covariance_pass(spec, layout)
    trace_hat = filter(spec, map_result.eta_hat, layout, cov=cov)
    plan = BackwardPlan.from_trace(trace_hat)
    boot = DirichletBootstrap(map_result.eta_hat, data, config.alpha, trace=trace_hat)
    S = config.num_samples
    blocks = [list(range(a, min(a + block_size, S))) for a in range(0, S, block_size)]
    run = lambda draws: _uncollapse_block(spec, cov, plan, boot, config.seed, draws,
                                          trace_hat.nu_T, trace_hat.M0)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(b) for b in blocks]
    timing["sample"] = time.perf_counter() - t0

    failures = {}
    for r in results:
        failures.update(r[4])
    if failures:
        raise PipelineError(failures)
    eta = np.concatenate([r[0] for r in results])
    theta = np.concatenate([r[1] for r in results]).transpose(0, 2, 3, 1)
    theta0 = np.concatenate([r[2] for r in results])
    sigma = np.concatenate([r[3] for r in results])
    metadata = {
        "map_converged": bool(map_result.converged),
        "map_iterations": int(map_result.iterations),
        "map_objective": float(map_result.objective),
        "map_grad_norm": float(map_result.grad_norm),
        "missing_filled_from_forecast": int(boot.miss_idx.size),
        "seconds": timing,
    }
    return PosteriorDraws(eta=eta, theta=theta, theta0=theta0, sigma=sigma, metadata=metadata)


# Gibbs updates for diagonal W

def transition_noise(draw, spec, layout=None):
    """Omega_t = Theta_t - G_t Theta_{t-1}, stacked (T, Q, p).

    Each series starts from its own Theta_0.
    """
    layout = Layout.of(layout, T=np.shape(draw.theta)[0])
    _, G, _, _ = spec.expand(layout.T)
    theta = np.asarray(draw.theta)
    omega = np.empty_like(theta)
    for k, (a, b) in enumerate(layout.bounds):
        prev = draw.theta0[k]
        for t in range(a, b):
            omega[t] = theta[t] - G[t] @ prev
            prev = theta[t]
    return omega


def whiten(omega, sigma):
    """Omega* = Omega L with L L^T = Sigma^{-1}; rows become iid N(0, w_q)."""
    try:
        Ls = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Sigma is not positive definite") from exc
    # L = Ls^{-T}; any L with L L^T = Sigma^{-1} gives the same row norms
    omega = np.asarray(omega, dtype=float)
    flat = omega.reshape(-1, omega.shape[-1])
    return solve_triangular(Ls, flat.T, lower=True).T.reshape(omega.shape)


def w_posterior(omega_star, prior):
    """Inverse-gamma posterior (shape, rate) for each w_q given whitened noise.

    With N entries per component, shape ``a + N / 2`` and rate
    ``b + sum(omega_star**2) / 2``.
    """
    omega_star = np.asarray(omega_star, dtype=float)
    Q = omega_star.shape[1]
    a, b = np.asarray(prior.a, dtype=float), np.asarray(prior.b, dtype=float)
    if a.shape != (Q,) or b.shape != (Q,):
        raise ValueError(f"hyperprior has {a.size} components, state has Q={Q}")
    N = omega_star.shape[0] * omega_star.shape[2]
    shape = a + 0.5 * N
    rate = b + 0.5 * np.sum(omega_star ** 2, axis=(0, 2))
    return shape, rate


def sample_inverse_gamma(shape, rate, rng):
    return rate / rng.standard_gamma(shape)


def gibbs_w_update(draw, spec, prior, seed, layout=None):
    """Conjugate draw of the diagonal of W given one (Theta, Sigma) draw."""
    layout = Layout.of(layout, T=draw.theta.shape[0])
    omega_star = whiten(transition_noise(draw, spec, layout), draw.sigma)
    shape, rate = w_posterior(omega_star, prior)
    return sample_inverse_gamma(shape, rate, rng_for(seed))


@dataclass
class GibbsState:
    w: np.ndarray
    eta_hat: np.ndarray = None
    eta: np.ndarray = None
    draw: StateDraw = None
    iteration: int = 0


@dataclass
class GibbsChain:
    """Chain output; row i holds the state after iteration i."""

    w: np.ndarray            # (n, Q)
    eta: np.ndarray          # (n, p, T)
    theta: np.ndarray        # (n, Q, p, T)
    sigma: np.ndarray        # (n, p, p)
    map_iterations: np.ndarray
    seconds: np.ndarray
    point_mode: bool = False

    @property
    def length(self):
        return self.w.shape[0]


class GibbsError(RuntimeError):
    def __init__(self, message, iteration, chain):
        self.iteration = iteration
        self.chain = chain
        super().__init__(f"iteration {iteration}: {message}")


def _diagonal_w(spec):
    W = np.asarray(spec.W)
    if W.ndim != 2:
        raise ValueError("Gibbs updates need a time-invariant W")
    if np.any(W - np.diag(np.diag(W))):
        raise ValueError("Gibbs updates need a diagonal W")
    return np.diag(W).copy()


def gibbs_chain(spec, data, hyperprior, iters, seed=0, opt_config=None, alpha=0.5,
                point_mode=False, w0=None, callback=None):
    """Blocked Gibbs sampler over (eta, Theta, Sigma) and diag(W).

    Each iteration re-fits the MAP at the current W (warm-started from the
    previous one), draws eta from the Dirichlet bootstrap (or uses the MAP
    itself with ``point_mode``), draws (Theta, Sigma) given eta and finally
    w given (Theta, Sigma). Iteration i uses the stream ``rng_for(seed, i)``.

    On failure a :class:`GibbsError` carries the chain up to the last
    completed iteration.
    """
    check(spec, data)
    w = _diagonal_w(spec) if w0 is None else np.asarray(w0, dtype=float).copy()
    if len(hyperprior.a) != spec.Q:
        raise ValueError(f"hyperprior has {len(hyperprior.a)} components, state has Q={spec.Q}")
    opt_config = opt_config or OptimizerConfig()
    layout = Layout.of(data)
    p, T, Q = spec.p, data.T, spec.Q
    out_w = np.empty((iters, Q))
    out_eta = np.empty((iters, p, T))
    out_theta = np.empty((iters, Q, p, T))
    out_sigma = np.empty((iters, p, p))
    out_iters = np.zeros(iters, dtype=int)
    out_sec = np.zeros(iters)

    def partial(n):
        return GibbsChain(out_w[:n], out_eta[:n], out_theta[:n], out_sigma[:n],
                          out_iters[:n], out_sec[:n], point_mode)

    state = GibbsState(w=w)
    for i in range(iters):
        t0 = time.perf_counter()
        try:
            spec_i = spec.replace(W=np.diag(state.w))
            obj = CollapsedObjective(spec_i, data)
            fit = map_estimate(spec_i, data, opt_config, eta0=state.eta_hat, objective=obj)
            rng = rng_for(seed, i)
            trace_hat = filter(spec_i, fit.eta_hat, layout, cov=obj.cov)
            if point_mode:
                eta, trace = fit.eta_hat, trace_hat
            else:
                eta = DirichletBootstrap(fit.eta_hat, data, alpha, trace=trace_hat).draw(rng)
                trace = filter(spec_i, eta, layout, cov=obj.cov)
            draw = smooth_draw(spec_i, trace, rng)
            w_new = gibbs_w_update(draw, spec_i, hyperprior, rng, layout)
        except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
            raise GibbsError(str(exc), i, partial(i)) from exc
        state = GibbsState(w=w_new, eta_hat=fit.eta_hat, eta=eta, draw=draw, iteration=i + 1)
        out_w[i] = w_new
        out_eta[i] = eta
        out_theta[i] = draw.theta.transpose(1, 2, 0)
        out_sigma[i] = draw.sigma
        out_iters[i] = fit.iterations
        out_sec[i] = time.perf_counter() - t0
        if callback is not None:
            callback(state)
    return partial(iters)


# Effective sample size

def autocorrelation(x):
    """Sample autocorrelation at all lags (biased autocovariance, via FFT)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n] / n
    return acov / acov[0]


def ess_report(x):
    """ESS with the initial monotone sequence estimator.

    Returns a dict with ``ess``, ``n`` and ``degenerate``; a constant chain
    reports ``ess = n`` with ``degenerate = True``. ESS is capped at ``n``.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise ValueError(f"ESS needs a chain of at least 10 values, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("chain contains non-finite values")
    if np.ptp(x) == 0:
        return {"ess": float(n), "n": n, "degenerate": True}
    rho = autocorrelation(x)
    pairs = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
    stop = np.flatnonzero(pairs <= 0)
    pairs = pairs[: stop[0]] if stop.size else pairs
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    ess = n / tau if tau > 0 else float(n)
    return {"ess": float(min(ess, n)), "n": n, "degenerate": False}


def effective_sample_size(x):
    return ess_report(x)["ess"]
