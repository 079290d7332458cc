"""Log-ratio transforms between the simplex and real coordinates.

The reference category for the additive log-ratio (ALR) is always the last
part. All functions accept either a single vector or a stack of vectors with
the parts along ``axis``.
"""

import numpy as np


def closure(x, axis=-1):
    """Rescale strictly positive parts so they sum to one along ``axis``."""
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("compositions must have strictly positive, finite parts")
    return x / x.sum(axis=axis, keepdims=True)


def alr(c, axis=-1):
    """Additive log-ratio transform with the last part as reference.

    Parameters
    ----------
    c : array_like
        Composition(s) with ``D`` strictly positive parts along ``axis``. The
        parts need not be closed; the transform is scale invariant.

    Returns
    -------
    numpy.ndarray
        ``log(c_i / c_D)`` for ``i < D``; ``D - 1`` entries along ``axis``.
    """
    c = np.asarray(c, dtype=float)
    if np.any(~np.isfinite(c)) or np.any(c <= 0):
        raise ValueError("alr requires strictly positive, finite parts")
    logc = np.log(np.moveaxis(c, axis, -1))
    out = logc[..., :-1] - logc[..., -1:]
    return np.moveaxis(out, -1, axis)


def alr_inverse(v, axis=-1):
    """Map ALR coordinates back to the simplex.

    Exponentiation is shifted by the running maximum (including the implicit
    zero of the reference part), so large coordinates do not overflow.
    """
    v = np.moveaxis(np.asarray(v, dtype=float), axis, -1)
    if np.any(~np.isfinite(v)):
        raise ValueError("log-ratio coordinates must be finite")
    full = np.concatenate([v, np.zeros(v.shape[:-1] + (1,))], axis=-1)
    full = full - full.max(axis=-1, keepdims=True)
    ex = np.exp(full)
    out = ex / ex.sum(axis=-1, keepdims=True)
    return np.moveaxis(out, -1, axis)


def clr(c, axis=-1):
    c = np.asarray(c, dtype=float)
    if np.any(~np.isfinite(c)) or np.any(c <= 0):
        raise ValueError("clr requires strictly positive, finite parts")
    logc = np.log(c)
    return logc - logc.mean(axis=axis, keepdims=True)


def alr_to_clr(v, axis=-1):
    """Convert ALR coordinates to CLR coordinates without leaving log space.

    With the reference part fixed at zero, ``clr_d = v_d - mean(v, 0)``.
    The result has ``D`` entries along ``axis`` that sum to zero.
    """
    v = np.moveaxis(np.asarray(v, dtype=float), axis, -1)
    full = np.concatenate([v, np.zeros(v.shape[:-1] + (1,))], axis=-1)
    out = full - full.mean(axis=-1, keepdims=True)
    return np.moveaxis(out, -1, axis)


def clr_to_alr(w, axis=-1):
    w = np.moveaxis(np.asarray(w, dtype=float), axis, -1)
    out = w[..., :-1] - w[..., -1:]
    return np.moveaxis(out, -1, axis)
