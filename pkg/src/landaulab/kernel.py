"""Closed-form Landau collision coefficients for hard potentials.

All functions broadcast over leading axes: a velocity is an array whose last
axis has length 3, a matrix one whose last two axes are 3x3.

    a(x)     = |x|^(2+g) (I - x x^T / |x|^2)
    b(x)     = div a(x) = -2 |x|^g x
    sigma(x) = a(x)^(1/2) = |x|^(1+g/2) (I - x x^T / |x|^2)

with 0 < g <= 1. Every coefficient vanishes at x = 0.
"""

import numpy as np

PSD_TOL = 1e-10


def check_gamma(gamma):
    """Validate 0 < gamma <= 1; scalars come back as float, arrays as float arrays.

    Array values broadcast against the leading (sample) axes of the inputs.
    """
    if np.ndim(gamma) == 0:
        gamma = float(gamma)
        if not (0.0 < gamma <= 1.0):
            raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
        return gamma
    gamma = np.asarray(gamma, dtype=float)
    if not np.all((gamma > 0.0) & (gamma <= 1.0)):
        raise ValueError("gamma must lie in (0, 1]")
    return gamma


def norm(x):
    x = np.asarray(x, dtype=float)
    return np.sqrt(np.sum(x * x, axis=-1))


def abs_pow(r, e):
    """r**e for r >= 0 and e >= 0, with 0**0 = 1 and 0**e = 0 otherwise."""
    r = np.asarray(r, dtype=float)
    if np.ndim(e) == 0 and e == 0:
        return np.ones_like(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.exp(e * np.log(r))
    return np.where(r > 0.0, out, np.where(np.asarray(e) == 0, 1.0, 0.0))


def _outer(x, y):
    return x[..., :, None] * y[..., None, :]


def proj_perp(x):
    """Orthogonal projector onto the plane perpendicular to ``x``.

    Raises
    ------
    ValueError
        If any input vector is zero; the projector is undefined there.
    """
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    if np.any(r2 == 0.0):
        raise ValueError("proj_perp is undefined at x = 0")
    return np.eye(3) - _outer(x, x) / r2[..., None, None]


def a_matrix(x, gamma):
    gamma = check_gamma(gamma)
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    rg = abs_pow(np.sqrt(r2), gamma)
    # |x|^g (|x|^2 I - x x^T) avoids dividing by |x|^2
    return rg[..., None, None] * (r2[..., None, None] * np.eye(3) - _outer(x, x))


def b_vector(x, gamma):
    gamma = check_gamma(gamma)
    x = np.asarray(x, dtype=float)
    return -2.0 * abs_pow(norm(x), gamma)[..., None] * x


def sigma_matrix(x, gamma):
    gamma = check_gamma(gamma)
    x = np.asarray(x, dtype=float)
    r = norm(x)
    safe = np.where(r > 0.0, r, 1.0)
    u = x / safe[..., None]
    s = abs_pow(r, 1.0 + 0.5 * gamma)
    return s[..., None, None] * (np.eye(3) - _outer(u, u))


def sigma_apply(x, y, gamma):
    """sigma(x) @ y without forming the matrix."""
    gamma = check_gamma(gamma)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = norm(x)
    safe = np.where(r > 0.0, r, 1.0)
    u = x / safe[..., None]
    s = abs_pow(r, 1.0 + 0.5 * gamma)
    proj = y - np.sum(u * y, axis=-1)[..., None] * u
    return s[..., None] * proj


def sigma_inner(x, xt, gamma):
    """Frobenius product <<sigma(x), sigma(xt)>> in closed form."""
    gamma = check_gamma(gamma)
    x = np.asarray(x, dtype=float)
    xt = np.asarray(xt, dtype=float)
    r = norm(x)
    rt = norm(xt)
    both = (r > 0.0) & (rt > 0.0)
    denom = np.where(both, r * rt, 1.0)
    cos2 = (np.sum(x * xt, axis=-1) / denom) ** 2
    val = abs_pow(r, 1.0 + 0.5 * gamma) * abs_pow(rt, 1.0 + 0.5 * gamma) * (1.0 + cos2)
    return np.where(both, val, 0.0)


def frobenius(A, B):
    return np.sum(np.asarray(A) * np.asarray(B), axis=(-2, -1))


def psd_sqrt(A, tol=PSD_TOL):
    """Symmetric PSD square root by spectral decomposition.

    Eigenvalues in ``[-tol * scale, 0)`` are clamped to zero, where ``scale``
    is the largest eigenvalue magnitude (or 1 for tiny matrices). Anything
    more negative, or asymmetry beyond the same tolerance, is rejected.

    Parameters
    ----------
    A : array_like, shape (..., 3, 3)
    tol : float

    Returns
    -------
    ndarray, shape (..., 3, 3)
    """
    A = np.asarray(A, dtype=float)
    if A.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) input, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("psd_sqrt: non-finite entries")
    scale = np.maximum(np.max(np.abs(A), axis=(-2, -1)), 1.0)
    asym = np.max(np.abs(A - np.swapaxes(A, -1, -2)), axis=(-2, -1))
    if np.any(asym > tol * scale):
        raise ValueError(f"psd_sqrt: matrix not symmetric (max asymmetry {asym.max():.3e})")
    S = 0.5 * (A + np.swapaxes(A, -1, -2))
    w, U = np.linalg.eigh(S)
    if np.any(w < -tol * scale[..., None]):
        raise ValueError(f"psd_sqrt: matrix indefinite (min eigenvalue {w.min():.3e})")
    root = np.sqrt(np.clip(w, 0.0, None))
    return (U * root[..., None, :]) @ np.swapaxes(U, -1, -2)
