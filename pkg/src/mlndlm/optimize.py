"""MAP estimation of eta under the collapsed model."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .compositional import alr
from .objective import CollapsedObjective

log = logging.getLogger(__name__)

INIT_MODES = ("alr_of_smoothed_proportions", "zeros", "user_supplied")
PSEUDOCOUNT = 0.5


@dataclass
class OptimizerConfig:
    max_iters: int = 5000
    grad_tol: float = 1e-5
    rel_obj_tol: float = 1e-15
    history_size: int = 10
    init_mode: str = "alr_of_smoothed_proportions"

    def __post_init__(self):
        problems = []
        if self.max_iters < 0:
            problems.append("max_iters must be >= 0")
        if not self.grad_tol > 0 or not self.rel_obj_tol > 0:
            problems.append("tolerances must be positive")
        if self.history_size < 1:
            problems.append("history_size must be >= 1")
        if self.init_mode not in INIT_MODES:
            problems.append(f"init_mode must be one of {INIT_MODES}")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class OptimizationResult:
    eta_hat: np.ndarray
    trajectory: list = field(default_factory=list)  # (iter, objective, grad_norm, seconds)
    converged: bool = False
    iterations: int = 0
    message: str = ""
    objective: float = float("nan")
    grad_norm: float = float("nan")
    init_mode: str = ""


def _prior_path(spec, data):
    """F_t^T A_t with means propagated from M0 and no data."""
    F, G, _, _ = spec.expand(data.T)
    out = np.empty((spec.p, data.T))
    for k, (a, b) in enumerate(data.series_bounds):
        M = spec.initial(k)[0]
        for t in range(a, b):
            M = G[t] @ M
            out[:, t] = F[t] @ M
    return out


def init_eta(data, mode="alr_of_smoothed_proportions", spec=None, eta=None):
    """Starting point for the optimizer, shape (D - 1, T).

    ``alr_of_smoothed_proportions`` takes ``alr((Y + 0.5) / (n + 0.5 D))`` on
    observed columns and interpolates linearly across missing ones within
    each series. A series with no observed column falls back to the prior
    mean path (requires ``spec``).
    """
    p, T = data.D - 1, data.T
    if mode == "zeros":
        return np.zeros((p, T))
    if mode == "user_supplied":
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (p, T):
            raise ValueError(f"user-supplied eta must have shape {(p, T)}, got {eta.shape}")
        return eta.copy()
    if mode != "alr_of_smoothed_proportions":
        raise ValueError(f"unknown init mode {mode!r}")
    Y = np.asarray(data.Y, dtype=float)
    props = (Y + PSEUDOCOUNT) / (Y.sum(axis=0) + PSEUDOCOUNT * data.D)
    raw = alr(props, axis=0)
    out = np.empty((p, T))
    prior = None
    for a, b in data.series_bounds:
        obs = np.flatnonzero(data.observed[a:b])
        if obs.size == 0:
            if spec is None:
                raise ValueError("a series has no observations; pass spec to use its prior path")
            if prior is None:
                prior = _prior_path(spec, data)
            out[:, a:b] = prior[:, a:b]
            continue
        grid = np.arange(b - a)
        for i in range(p):
            out[i, a:b] = np.interp(grid, obs, raw[i, a + obs])
    return out


class LineSearchFailure(RuntimeError):
    pass


def _line_search(phi, f0, d0, a0, fscale, c1=1e-4, c2=0.9, maxls=40):
    """Bracketing line search on the directional derivative.

    Accepts a step meeting the strong Wolfe conditions, or the approximate
    Wolfe conditions when the change in value is within rounding of
    ``fscale`` (there the value carries no usable information but the
    derivative still does). Interpolates by secant on the derivative, which
    is exact for quadratics and insensitive to noise in the value.

    Returns ``(a, f, g, d)`` for the accepted step.
    """
    eps_f = 64 * np.finfo(float).eps * max(1.0, abs(fscale))
    lo, hi = 0.0, np.inf
    dlo, dhi = d0, np.nan
    best = None
    a = a0
    for _ in range(maxls):
        f, g, d = phi(a)
        if not (np.isfinite(f) and np.isfinite(d)):
            hi, dhi = a, np.nan
            a = lo + 0.1 * (a - lo)
            continue
        armijo = f <= f0 + c1 * a * d0
        approx = abs(f - f0) <= eps_f and d <= (2 * c1 - 1) * d0
        if (armijo or approx) and abs(d) <= -c2 * d0:
            return a, f, g, d
        if f < f0 and (best is None or f < best[1]):
            best = (a, f, g, d)
        if (armijo or approx) and d < 0:
            lo, dlo = a, d
        else:
            hi, dhi = a, d
        if not np.isfinite(hi):
            a = 4.0 * a
            continue
        width = hi - lo
        if np.isfinite(dhi) and dhi > dlo and dhi >= 0:
            a = lo - dlo * width / (dhi - dlo)
        else:
            a = lo + 0.5 * width
        a = min(max(a, lo + 0.1 * width), hi - 0.1 * width)
        if width <= 1e-16 * max(1.0, hi):
            break
    if best is not None:
        return best
    raise LineSearchFailure("no step satisfied the Wolfe conditions")


def lbfgs(fun_grad, x0, history_size=10, grad_tol=1e-5, rel_obj_tol=1e-15,
          max_iters=5000, callback=None):
    """Limited-memory BFGS minimizer.

    ``fun_grad(x) -> (f, g)``. ``callback(x, f, g)`` runs after every
    accepted step. Returns ``(x, f, g, iterations, converged, message)``.
    """
    x = np.array(x0, dtype=float)
    f, g = fun_grad(x)
    S, Yd, rho = [], [], []
    message = "maximum iterations reached"
    k = 0
    while True:
        if np.max(np.abs(g)) < grad_tol:
            return x, f, g, k, True, "gradient sup-norm below tolerance"
        if k >= max_iters:
            break
        q = -g.copy()
        alphas = []
        for s, y, r in zip(reversed(S), reversed(Yd), reversed(rho)):
            al = r * (s @ q)
            alphas.append(al)
            q -= al * y
        if S:
            q *= (S[-1] @ Yd[-1]) / (Yd[-1] @ Yd[-1])
        for (s, y, r), al in zip(zip(S, Yd, rho), reversed(alphas)):
            q += (al - r * (y @ q)) * s
        d = q
        d0 = g @ d
        if not d0 < 0:
            S, Yd, rho = [], [], []
            d = -g
            d0 = g @ d
        a0 = 1.0 if S else min(1.0, 1.0 / np.max(np.abs(g)))

        def phi(a):
            fa, ga = fun_grad(x + a * d)
            return fa, ga, ga @ d

        try:
            a, f_new, g_new, _ = _line_search(phi, f, d0, a0, f)
        except LineSearchFailure as exc:
            if S:
                S, Yd, rho = [], [], []
                continue
            message = f"line search failed: {exc}"
            break
        x_new = x + a * d
        s, y = x_new - x, g_new - g
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            S.append(s)
            Yd.append(y)
            rho.append(1.0 / sy)
            if len(S) > history_size:
                S.pop(0), Yd.pop(0), rho.pop(0)
        rel = abs(f - f_new) / max(abs(f), abs(f_new), 1.0)
        x, f, g = x_new, f_new, g_new
        k += 1
        if callback is not None:
            callback(x, f, g)
        if np.max(np.abs(g)) < grad_tol:
            return x, f, g, k, True, "gradient sup-norm below tolerance"
        if rel < rel_obj_tol:
            return x, f, g, k, True, "relative objective change below tolerance"
    return x, f, g, k, False, message


def map_estimate(spec, data, config=None, eta0=None, objective=None):
    """Minimize -log p(eta | Y) with limited-memory BFGS.

    Stops when the gradient sup-norm drops below ``grad_tol``, the relative
    objective change below ``rel_obj_tol``, or after ``max_iters``. A line
    search failure returns the best iterate with ``converged=False``.
    ``eta0`` overrides the configured initialization (warm starts).
    """
    config = OptimizerConfig() if config is None else config
    obj = CollapsedObjective(spec, data) if objective is None else objective
    if eta0 is None:
        x0 = init_eta(data, config.init_mode, spec=spec)
        mode = config.init_mode
    else:
        x0 = np.asarray(eta0, dtype=float)
        mode = "warm_start"
    shape = x0.shape
    t0 = time.perf_counter()
    trajectory = []

    def callback(x, f, g):
        trajectory.append((len(trajectory), float(f), float(np.max(np.abs(g))), time.perf_counter() - t0))

    f0, g0 = obj.fun_grad(x0.ravel())
    callback(x0.ravel(), f0, g0)
    x, f, g, iters, converged, message = lbfgs(
        obj.fun_grad, x0.ravel(), history_size=config.history_size,
        grad_tol=config.grad_tol, rel_obj_tol=config.rel_obj_tol,
        max_iters=config.max_iters, callback=callback,
    )
    gnorm = float(np.max(np.abs(g)))
    if not converged:
        log.warning("MAP optimization did not converge: %s (grad sup-norm %.3g)", message, gnorm)
    return OptimizationResult(
        eta_hat=x.reshape(shape), trajectory=trajectory, converged=converged,
        iterations=iters, message=message, objective=float(f),
        grad_norm=gnorm, init_mode=mode,
    )
