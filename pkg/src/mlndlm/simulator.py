"""Synthetic MLN-DLM datasets with known ground truth."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .compositional import alr_inverse
from .model import CountDataset, ModelSpec
from .smoother import psd_factor, rng_for, sample_inverse_wishart


@dataclass
class SimConfig:
    """Random-walk simulation settings.

    ``T_total`` is split into series of ``series_length`` points (the last
    series takes the remainder). ``reversion`` is the state transition
    coefficient; 1 gives the plain random walk. ``n_total`` is the
    multinomial total drawn per observed column.
    """

    D: int = 3
    T_total: int = 300
    series_length: int = 100
    missing_fraction: float = 0.05
    w: float = 0.45
    Xi0: list = None
    nu0: float = None
    M0_range: tuple = (0.1, 1.0)
    C0_range: tuple = (1.0, 1.5)
    n_total: int = 500
    reversion: float = 1.0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.D < 2:
            problems.append("D must be >= 2")
        if self.T_total < 1 or self.series_length < 1:
            problems.append("T_total and series_length must be positive")
        if not 0 <= self.missing_fraction < 1:
            problems.append("missing_fraction must be in [0, 1)")
        if not self.w > 0:
            problems.append("w must be positive")
        if self.n_total < 0:
            problems.append("n_total must be nonnegative")
        if problems:
            raise ValueError("; ".join(problems))
        if self.Xi0 is None:
            self.Xi0 = np.eye(self.D - 1).tolist()
        if self.nu0 is None:
            self.nu0 = float(self.D + 3)
        self.M0_range = tuple(self.M0_range)
        self.C0_range = tuple(self.C0_range)

    @property
    def series_lengths(self):
        full, rest = divmod(self.T_total, self.series_length)
        return (self.series_length,) * full + ((rest,) if rest else ())

    def to_dict(self):
        d = asdict(self)
        d["M0_range"] = list(self.M0_range)
        d["C0_range"] = list(self.C0_range)
        return d


def draw_missing(series_lengths, fraction, rng):
    observed = []
    for n in series_lengths:
        mask = np.ones(n, dtype=bool)
        k = int(round(fraction * n))
        if k:
            mask[rng.choice(n, size=k, replace=False)] = False
        observed.append(mask)
    return np.concatenate(observed)


def simulate_from_spec(spec, series_lengths, sigma, rng, n_total=500, observed=None):
    """Forward-simulate states, log-ratios and counts from a model.

    Returns ``(Y, theta, theta0, eta)`` with theta (T, Q, p), theta0 (K, Q, p)
    and eta (p, T). Counts on missing columns are zero.
    """
    T = int(sum(series_lengths))
    F, G, W, gamma = spec.expand(T)
    p, Q = spec.p, spec.Q
    Ls = psd_factor(sigma)
    theta = np.empty((T, Q, p))
    theta0 = np.empty((len(series_lengths), Q, p))
    eta = np.empty((p, T))
    t = 0
    for k, n in enumerate(series_lengths):
        M0, C0 = spec.initial(k)
        state = M0 + psd_factor(C0) @ rng.standard_normal((Q, p)) @ Ls.T
        theta0[k] = state
        for _ in range(n):
            state = G[t] @ state + psd_factor(W[t]) @ rng.standard_normal((Q, p)) @ Ls.T
            theta[t] = state
            eta[:, t] = F[t] @ state + np.sqrt(gamma[t]) * (Ls @ rng.standard_normal(p))
            t += 1
    pi = alr_inverse(eta, axis=0)
    obs = np.ones(T, dtype=bool) if observed is None else observed
    Y = np.zeros((p + 1, T), dtype=np.int64)
    for t in np.flatnonzero(obs):
        Y[:, t] = rng.multinomial(n_total, pi[:, t])
    return Y, theta, theta0, eta


def simulate(config):
    """Simulate a multi-series random-walk dataset.

    Returns ``(data, truth)``; ``truth`` holds ``spec`` (the generating model,
    with its drawn M0 and C0), ``sigma``, ``theta`` (T, Q, p), ``theta0``,
    ``eta`` (p, T) and ``pi`` (D, T).
    """
    rng = rng_for(config.seed)
    p = config.D - 1
    Xi0 = np.asarray(config.Xi0, dtype=float)
    sigma = sample_inverse_wishart(Xi0, config.nu0, seed=rng)
    M0 = rng.uniform(*config.M0_range, size=(1, p))
    C0 = rng.uniform(*config.C0_range, size=(1, 1))
    spec = ModelSpec(
        F=np.ones(1), G=np.full((1, 1), float(config.reversion)), W=np.full((1, 1), config.w),
        gamma=1.0, M0=M0, C0=C0, Xi0=Xi0, nu0=config.nu0,
    )
    lengths = config.series_lengths
    observed = draw_missing(lengths, config.missing_fraction, rng)
    Y, theta, theta0, eta = simulate_from_spec(spec, lengths, sigma, rng, config.n_total, observed)
    data = CountDataset(Y, observed, lengths)
    truth = {
        "spec": spec, "sigma": sigma, "theta": theta, "theta0": theta0,
        "eta": eta, "pi": alr_inverse(eta, axis=0),
    }
    return data, truth


def sparsity_report(data):
    """Fraction of zero counts among observed cells."""
    Y = np.asarray(data.Y)[:, np.asarray(data.observed, dtype=bool)]
    if Y.size == 0:
        return 0.0
    return float(np.mean(Y == 0))
