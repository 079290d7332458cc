"""Model class, dataset container and validation for MLN-DLMs.

A model is the quadruple (F, G, W, gamma) plus the matrix-normal prior on the
initial state (M0, C0) and the inverse-Wishart prior on Sigma (Xi0, nu0).
``nu0`` uses the standard inverse-Wishart convention, E[Sigma] =
Xi0 / (nu0 - p - 1) with ``p = D - 1``.

System terms may be constants (broadcast over time) or full per-time stacks
over the concatenated time axis of all series.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SYM_TOL = 1e-10


class ValidationError(ValueError):
    """Raised when a model/dataset pair fails validation.

    ``violations`` holds every problem found, not only the first.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class Violation:
    field: str
    message: str

    def __str__(self):
        return f"{self.field}: {self.message}"


def _frozen(x, dtype=float):
    a = np.array(x, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """System matrices and priors of an MLN-DLM.

    Shapes (Q state dimensions, p = D - 1 log-ratio coordinates, T total time
    points, K series):

    - F: (Q,) or (T, Q)
    - G: (Q, Q) or (T, Q, Q)
    - W: (Q, Q) or (T, Q, Q)
    - gamma: scalar or (T,)
    - M0: (Q, p) or (K, Q, p)
    - C0: (Q, Q) or (K, Q, Q)
    - Xi0: (p, p); nu0: scalar
    """

    F: np.ndarray
    G: np.ndarray
    W: np.ndarray
    gamma: np.ndarray
    M0: np.ndarray
    C0: np.ndarray
    Xi0: np.ndarray
    nu0: float

    def __post_init__(self):
        for name in ("F", "G", "W", "gamma", "M0", "C0", "Xi0"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "nu0", float(self.nu0))

    @property
    def Q(self):
        return self.G.shape[-1]

    @property
    def p(self):
        return self.Xi0.shape[0]

    @property
    def D(self):
        return self.p + 1

    def expand(self, T):
        """Per-time stacks ``(F, G, W, gamma)`` of leading length ``T``."""
        Q = self.Q
        F = np.broadcast_to(self.F, (T, Q)) if self.F.ndim == 1 else self.F
        G = np.broadcast_to(self.G, (T, Q, Q)) if self.G.ndim == 2 else self.G
        W = np.broadcast_to(self.W, (T, Q, Q)) if self.W.ndim == 2 else self.W
        g = np.broadcast_to(self.gamma, (T,)) if self.gamma.ndim == 0 else self.gamma
        if F.shape[0] != T or G.shape[0] != T or W.shape[0] != T or g.shape[0] != T:
            raise ValueError(f"time-varying system terms do not have length T={T}")
        return F, G, W, g

    def initial(self, k):
        """Prior ``(M0, C0)`` for series ``k``."""
        M0 = self.M0 if self.M0.ndim == 2 else self.M0[k]
        C0 = self.C0 if self.C0.ndim == 2 else self.C0[k]
        return M0, C0

    def replace(self, **changes):
        kw = {name: getattr(self, name) for name in self.__dataclass_fields__}
        kw.update(changes)
        return ModelSpec(**kw)

    def to_dict(self):
        return {
            "F": self.F.tolist(),
            "G": self.G.tolist(),
            "W": self.W.tolist(),
            "gamma": self.gamma.tolist(),
            "M0": self.M0.tolist(),
            "C0": self.C0.tolist(),
            "Xi0": self.Xi0.tolist(),
            "nu0": self.nu0,
        }

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in ("F", "G", "W", "M0", "C0", "Xi0", "nu0") if k not in d]
        if missing:
            raise ValidationError([Violation(k, "missing key") for k in missing])
        return cls(
            F=d["F"], G=d["G"], W=d["W"], gamma=d.get("gamma", 1.0),
            M0=d["M0"], C0=d["C0"], Xi0=d["Xi0"], nu0=d["nu0"],
        )

    def __eq__(self, other):
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in self.__dataclass_fields__
        )


@dataclass(frozen=True, eq=False)
class CountDataset:
    """D x T count matrix with missingness mask and multi-series layout.

    Series are stored back to back along the time axis; ``series_lengths``
    partitions the columns. Columns with ``observed=False`` carry no data
    (their counts are ignored and stored as zero).
    """

    Y: np.ndarray
    observed: np.ndarray = None
    series_lengths: tuple = None

    def __post_init__(self):
        Y = np.asarray(self.Y)
        if Y.ndim != 2:
            raise ValueError("Y must be a D x T matrix")
        T = Y.shape[1]
        obs = np.ones(T, dtype=bool) if self.observed is None else np.asarray(self.observed, dtype=bool)
        lengths = (T,) if self.series_lengths is None else tuple(int(n) for n in self.series_lengths)
        Yi = np.array(Y, dtype=np.int64)
        if not np.array_equal(Yi, Y):
            raise ValueError("counts must be integers")
        if obs.shape == (T,):
            Yi[:, ~obs] = 0
        object.__setattr__(self, "Y", _frozen(Yi, np.int64))
        object.__setattr__(self, "observed", _frozen(obs, bool))
        object.__setattr__(self, "series_lengths", lengths)

    @property
    def D(self):
        return self.Y.shape[0]

    @property
    def T(self):
        return self.Y.shape[1]

    @property
    def K(self):
        return len(self.series_lengths)

    @property
    def totals(self):
        return self.Y.sum(axis=0)

    @property
    def series_bounds(self):
        """List of ``(start, stop)`` column ranges, one per series."""
        stops = np.cumsum(self.series_lengths)
        starts = stops - np.asarray(self.series_lengths)
        return [(int(a), int(b)) for a, b in zip(starts, stops)]

    @property
    def series_starts(self):
        starts = np.zeros(self.T, dtype=bool)
        for a, _ in self.series_bounds:
            if a < self.T:
                starts[a] = True
        return starts

    def reclassify_empty_as_missing(self):
        """Treat observed columns with zero total count as missing."""
        obs = self.observed & (self.totals > 0)
        return CountDataset(self.Y, obs, self.series_lengths)

    def series(self, k):
        a, b = self.series_bounds[k]
        return CountDataset(self.Y[:, a:b], self.observed[a:b], (b - a,))

    def reorder(self, order):
        """Dataset with series concatenated in the given order."""
        parts = [self.series(k) for k in order]
        return CountDataset(
            np.concatenate([s.Y for s in parts], axis=1),
            np.concatenate([s.observed for s in parts]),
            tuple(s.T for s in parts),
        )


@dataclass(frozen=True)
class HyperPrior:
    """Independent inverse-gamma priors on the diagonal of W.

    ``w_q ~ InvGamma(shape=a_q, rate=b_q)``, density proportional to
    ``w^(-a-1) exp(-b / w)``.
    """

    a: tuple
    b: tuple

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(x) for x in np.atleast_1d(self.a)))
        object.__setattr__(self, "b", tuple(float(x) for x in np.atleast_1d(self.b)))

    def to_dict(self):
        return {"a": list(self.a), "b": list(self.b)}

    @classmethod
    def from_dict(cls, d):
        return cls(a=d["a"], b=d["b"])


def _check_sym(M, name, out, psd=False, pd=False):
    if not np.all(np.isfinite(M)):
        out.append(Violation(name, "non-finite entries"))
        return
    asym = np.max(np.abs(M - np.swapaxes(M, -1, -2))) if M.size else 0.0
    if asym > SYM_TOL:
        out.append(Violation(name, f"not symmetric (max asymmetry {asym:.3g})"))
        return
    if pd or psd:
        eig = np.linalg.eigvalsh(M)
        if pd and np.any(eig <= 0):
            out.append(Violation(name, f"not positive definite (min eigenvalue {eig.min():.3g})"))
        elif psd and np.any(eig < -SYM_TOL):
            out.append(Violation(name, f"not positive semidefinite (min eigenvalue {eig.min():.3g})"))


def validate(spec, data=None):
    """Check a model (and optionally a dataset) for consistency.

    Returns a list of :class:`Violation`; an empty list means valid.
    """
    out = []
    Q = spec.G.shape[-1] if spec.G.ndim >= 2 else 0
    p = spec.Xi0.shape[0] if spec.Xi0.ndim == 2 else 0
    if spec.G.ndim not in (2, 3) or spec.G.shape[-2] != spec.G.shape[-1]:
        out.append(Violation("G", f"expected (Q, Q) or (T, Q, Q), got {spec.G.shape}"))
    if spec.F.ndim not in (1, 2) or spec.F.shape[-1] != Q:
        out.append(Violation("F", f"expected length-{Q} loading, got shape {spec.F.shape}"))
    if spec.W.ndim not in (2, 3) or spec.W.shape[-2:] != (Q, Q):
        out.append(Violation("W", f"expected ({Q}, {Q}) blocks, got {spec.W.shape}"))
    else:
        _check_sym(spec.W, "W", out, psd=True)
    if spec.gamma.ndim > 1 or np.any(~(spec.gamma > 0)):
        out.append(Violation("gamma", "must be positive scalar(s)"))
    if spec.Xi0.ndim != 2 or spec.Xi0.shape[0] != spec.Xi0.shape[1]:
        out.append(Violation("Xi0", f"expected square matrix, got {spec.Xi0.shape}"))
    else:
        _check_sym(spec.Xi0, "Xi0", out, pd=True)
    if spec.M0.ndim not in (2, 3) or spec.M0.shape[-2:] != (Q, p):
        out.append(Violation("M0", f"expected ({Q}, {p}) blocks, got {spec.M0.shape}"))
    if spec.C0.ndim not in (2, 3) or spec.C0.shape[-2:] != (Q, Q):
        out.append(Violation("C0", f"expected ({Q}, {Q}) blocks, got {spec.C0.shape}"))
    else:
        _check_sym(spec.C0, "C0", out, pd=True)
    if not spec.nu0 > p - 1:
        out.append(Violation("nu0", f"must exceed D - 2 = {p - 1}, got {spec.nu0}"))

    if data is not None:
        T = data.T
        if data.D != p + 1:
            out.append(Violation("Y", f"has {data.D} rows but model implies D = {p + 1}"))
        if data.observed.shape != (T,):
            out.append(Violation("observed", f"mask length {data.observed.shape} != T = {T}"))
        if np.any(data.Y < 0):
            out.append(Violation("Y", "negative counts"))
        if sum(data.series_lengths) != T or any(n <= 0 for n in data.series_lengths):
            out.append(Violation(
                "series_lengths",
                f"{data.series_lengths} does not partition T = {T} into positive lengths",
            ))
        for name, arr, nd in (("F", spec.F, 2), ("G", spec.G, 3), ("W", spec.W, 3)):
            if arr.ndim == nd and arr.shape[0] != T:
                out.append(Violation(name, f"time-varying length {arr.shape[0]} != T = {T}"))
        if spec.gamma.ndim == 1 and spec.gamma.shape[0] != T:
            out.append(Violation("gamma", f"time-varying length {spec.gamma.shape[0]} != T = {T}"))
        for name, arr in (("M0", spec.M0), ("C0", spec.C0)):
            if arr.ndim == 3 and arr.shape[0] != data.K:
                out.append(Violation(name, f"per-series priors for {arr.shape[0]} series, data has {data.K}"))
    return out


def check(spec, data=None):
    """Raise :class:`ValidationError` unless ``validate`` finds nothing."""
    problems = validate(spec, data)
    if problems:
        raise ValidationError(problems)


def builtin_random_walk(D, T, w, Xi0=None, nu0=None, M0=0.0, C0=1.0):
    """Random walk on every log-ratio coordinate: Q = 1, F = G = 1, W = w.

    ``T`` is accepted for symmetry with data-dependent constructors; the
    returned system terms are constants.
    """
    if D < 2 or T < 1 or not w > 0:
        raise ValueError(f"invalid random walk parameters D={D}, T={T}, w={w}")
    p = D - 1
    return ModelSpec(
        F=np.ones(1),
        G=np.ones((1, 1)),
        W=np.full((1, 1), float(w)),
        gamma=1.0,
        M0=np.broadcast_to(np.asarray(M0, dtype=float), (1, p)).copy(),
        C0=np.full((1, 1), float(C0)),
        Xi0=np.eye(p) if Xi0 is None else Xi0,
        nu0=D + 3 if nu0 is None else nu0,
    )


def builtin_local_trend(D, T, w_theta, w_alpha, damping, Xi0=None, nu0=None, M0=0.0, C0=None):
    """Level plus damped velocity: Q = 2, F = (1, 0), G = [[1, 1], [0, damping]]."""
    if D < 2 or T < 1 or not w_theta > 0 or not w_alpha > 0 or not 0 < damping <= 1:
        raise ValueError(
            f"invalid local trend parameters D={D}, T={T}, w_theta={w_theta}, "
            f"w_alpha={w_alpha}, damping={damping}"
        )
    p = D - 1
    return ModelSpec(
        F=np.array([1.0, 0.0]),
        G=np.array([[1.0, 1.0], [0.0, float(damping)]]),
        W=np.diag([float(w_theta), float(w_alpha)]),
        gamma=1.0,
        M0=np.broadcast_to(np.asarray(M0, dtype=float), (2, p)).copy(),
        C0=np.eye(2) if C0 is None else C0,
        Xi0=np.eye(p) if Xi0 is None else Xi0,
        nu0=D + 3 if nu0 is None else nu0,
    )


def dumps_config(spec=None, hyperprior=None, **sections):
    d = {}
    if spec is not None:
        d["model"] = spec.to_dict()
    if hyperprior is not None:
        d["hyperprior"] = hyperprior.to_dict()
    d.update({k: v for k, v in sections.items() if v is not None})
    return json.dumps(d, indent=2, sort_keys=True)


def loads_config(text):
    """Parse a config document into a dict with typed ``model``/``hyperprior``."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError([Violation("config", f"not valid JSON: {exc}")]) from exc
    if not isinstance(d, dict):
        raise ValidationError([Violation("config", "top level must be an object")])
    out = dict(d)
    problems = []
    if isinstance(d.get("model"), dict) and "builtin" in d["model"]:
        pass  # resolved against the data dimensions later
    elif "model" in d:
        try:
            out["model"] = ModelSpec.from_dict(d["model"])
        except ValidationError as exc:
            problems.extend(Violation(f"model.{v.field}", v.message) for v in exc.violations)
        except (TypeError, ValueError) as exc:
            problems.append(Violation("model", str(exc)))
    if "hyperprior" in d:
        try:
            hp = HyperPrior.from_dict(d["hyperprior"])
            if any(x <= 0 for x in hp.a + hp.b):
                problems.append(Violation("hyperprior", "a and b must be positive"))
            out["hyperprior"] = hp
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(Violation("hyperprior", f"malformed: {exc}"))
    if problems:
        raise ValidationError(problems)
    return out


@dataclass
class Layout:
    """Time-axis bookkeeping shared by the filter and smoother."""

    observed: np.ndarray
    series_lengths: tuple
    starts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=bool)
        self.series_lengths = tuple(int(n) for n in self.series_lengths)
        stops = np.cumsum(self.series_lengths)
        self.starts = stops - np.asarray(self.series_lengths)

    @property
    def T(self):
        return self.observed.shape[0]

    @property
    def bounds(self):
        return [(int(a), int(a + n)) for a, n in zip(self.starts, self.series_lengths)]

    @classmethod
    def of(cls, data_or_layout, T=None):
        if isinstance(data_or_layout, Layout):
            return data_or_layout
        if isinstance(data_or_layout, CountDataset):
            return cls(data_or_layout.observed, data_or_layout.series_lengths)
        if data_or_layout is None:
            return cls(np.ones(T, dtype=bool), (T,))
        raise TypeError(f"cannot derive a layout from {type(data_or_layout).__name__}")
