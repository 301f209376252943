"""Moments of velocity ensembles and the explicit moment bounds.

m_p(F) = sum_i w_i |v_i|^p. Besides plain reductions the module evaluates
the moment differential inequality, the comparison bound for

    u' <= -a u^(1+alpha) + b u + c u^(1-beta),

the explicit decay bound for m_p with m_2 = 1, and Gaussian moments
sum_i w_i exp(a |v_i|^2).
"""

import math
from dataclasses import dataclass

import numba
import numpy as np

from .kernel import abs_pow, norm
from .transport import DiscreteMeasure

EXP_CLIP = 700.0
C_FLOOR = 1e-6


def _points_weights(F):
    if isinstance(F, DiscreteMeasure):
        return F.points, F.weights
    pts = np.atleast_2d(np.asarray(F, dtype=float))
    return pts, np.full(len(pts), 1.0 / len(pts))


def empirical_moment(F, p):
    """m_p of a DiscreteMeasure or of an (N, 3) array of equally weighted velocities."""
    if p < 0:
        raise ValueError("moment order must be >= 0")
    pts, w = _points_weights(F)
    # numpy sums contiguous arrays pairwise, which fixes the summation order
    return float(np.sum(w * abs_pow(norm(pts), p)))


def empirical_moments(F, orders):
    pts, w = _points_weights(F)
    r = norm(pts)
    return np.array([np.sum(w * abs_pow(r, p)) for p in orders])


def normalize_energy(F):
    """Divide velocities by sqrt(m_2) so that m_2 = 1. Returns (normalized, scale)."""
    pts, w = _points_weights(F)
    scale = math.sqrt(empirical_moment(F, 2))
    if scale == 0.0:
        raise ValueError("cannot normalize an ensemble with m_2 = 0")
    out = pts / scale
    if isinstance(F, DiscreteMeasure):
        return DiscreteMeasure(out, w), scale
    return out, scale


@dataclass(frozen=True)
class GaussianMoment:
    value: float
    clipped: bool

    @property
    def is_lower_bound(self):
        """A clipped estimate undercounts the heaviest particles."""
        return self.clipped


def gaussian_moment(F, a, cutoff=EXP_CLIP):
    """sum_i w_i exp(a |v_i|^2) with exponents capped at ``cutoff``."""
    if a <= 0:
        raise ValueError("gaussian_moment needs a > 0")
    pts, w = _points_weights(F)
    expo = a * np.sum(pts * pts, axis=-1)
    clipped = bool(np.any(expo > cutoff))
    return GaussianMoment(float(np.sum(w * np.exp(np.minimum(expo, cutoff)))), clipped)


@dataclass
class MomentSeries:
    """Moments m_p(f_t) on a time grid; ``values[i, j]`` is m_{orders[j]} at times[i]."""
    times: np.ndarray
    orders: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.orders = np.asarray(self.orders, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.times), len(self.orders)):
            raise ValueError("values must have shape (len(times), len(orders))")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(self.values < 0):
            raise ValueError("moments are nonnegative")
        zero = self.orders == 0
        if np.any(zero) and not np.allclose(self.values[:, zero], 1.0):
            raise ValueError("m_0 must equal 1")

    def moment(self, p):
        j = np.nonzero(self.orders == p)[0]
        if len(j) == 0:
            raise KeyError(f"order {p} not recorded")
        return self.values[:, j[0]]

    @classmethod
    def from_snapshots(cls, times, snapshots, orders):
        return cls(times, orders, np.array([empirical_moments(s, orders) for s in snapshots]))


def moment_ode_rhs_bound(p, m_p, m_pg, m_p2g, m_p2, m_2g, C):
    """-p m_{p+g} + p m_p + C p^2 (m_{p-2+g} + m_{p-2} m_{2+g})."""
    if p < 2:
        raise ValueError("moment bound needs p >= 2")
    if min(np.min(m_p), np.min(m_pg), np.min(m_p2g), np.min(m_p2), np.min(m_2g)) < 0:
        raise ValueError("moments must be nonnegative")
    return -p * m_pg + p * m_p + C * p * p * (m_p2g + m_p2 * m_2g)


def fit_moment_ode_constant(p, gamma, series):
    """Smallest C for which the finite-difference dm_p/dt stays below the bound.

    Uses forward differences of ``series`` (a MomentSeries recording the
    orders p, p+g, p-2+g, p-2, 2+g); moments are taken at the left point.
    """
    t = series.times
    m = {k: series.moment(k) for k in (p, p + gamma, p - 2 + gamma, p - 2, 2 + gamma)}
    dmdt = np.diff(m[p]) / np.diff(t)
    head = -p * m[p + gamma][:-1] + p * m[p][:-1]
    scale = p * p * (m[p - 2 + gamma][:-1] + m[p - 2][:-1] * m[2 + gamma][:-1])
    need = (dmdt - head) / scale
    return max(C_FLOOR, float(np.max(need)))


@dataclass(frozen=True)
class OdeParams:
    a: float
    b: float
    c: float
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("a", "b", "c", "alpha", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"OdeParams.{name} must be positive")


def ode_comparison_bound(params, t):
    """(2/(a alpha t))^(1/alpha) + (4b/a)^(1/alpha) + (4c/a)^(1/(alpha+beta))."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("ode_comparison_bound needs t > 0")
    a, b, c, al, be = params.a, params.b, params.c, params.alpha, params.beta
    return (2.0 / (a * al * t)) ** (1.0 / al) + (4.0 * b / a) ** (1.0 / al) \
        + (4.0 * c / a) ** (1.0 / (al + be))


@numba.njit(cache=True)
def _w_rhs(w, a, b, c, al, be):
    return al * (a - b * w - c * w ** (1.0 + be / al))


@numba.njit(cache=True)
def _rk4_w(w0, a, b, c, al, be, t_out, t_switch, h_fine, h_coarse):
    n = w0.shape[0]
    out = np.empty((n, t_out.shape[0]))
    for k in range(n):
        w = w0[k]
        t = 0.0
        j = 0
        while j < t_out.shape[0]:
            h = h_fine if t < t_switch - 1e-12 else h_coarse
            target = t_out[j]
            if t_switch > t + 1e-12:
                target = min(target, t_switch)
            if t + h > target:
                h = target - t
            if h > 1e-15:
                k1 = _w_rhs(w, a[k], b[k], c[k], al[k], be[k])
                k2 = _w_rhs(w + 0.5 * h * k1, a[k], b[k], c[k], al[k], be[k])
                k3 = _w_rhs(w + 0.5 * h * k2, a[k], b[k], c[k], al[k], be[k])
                k4 = _w_rhs(w + h * k3, a[k], b[k], c[k], al[k], be[k])
                w = w + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
                t = t + h
            while j < t_out.shape[0] and abs(t - t_out[j]) <= 1e-12:
                out[k, j] = w
                j += 1
    return out


def comparison_ode_solution(params, t_grid, u0=1e6, t_switch=0.1, h_fine=1e-5, h_coarse=1e-4):
    """RK4 solution of u' = -a u^(1+alpha) + b u + c u^(1-beta) at the times ``t_grid``.

    Integrates w = u^(-alpha), which solves the smooth equation
    w' = alpha (a - b w - c w^(1 + beta/alpha)) and stays bounded while u
    falls from a huge start value. Accepts one OdeParams or a list.
    """
    plist = [params] if isinstance(params, OdeParams) else list(params)
    t_grid = np.sort(np.asarray(t_grid, dtype=float))
    if np.any(t_grid <= 0):
        raise ValueError("output times must be positive")
    arr = {k: np.array([getattr(q, k) for q in plist], dtype=float)
           for k in ("a", "b", "c", "alpha", "beta")}
    w0 = u0 ** (-arr["alpha"])
    w = _rk4_w(w0, arr["a"], arr["b"], arr["c"], arr["alpha"], arr["beta"], t_grid,
               t_switch, h_fine, h_coarse)
    u = w ** (-1.0 / arr["alpha"][:, None])
    return u[0] if isinstance(params, OdeParams) else u


def random_ode_params(rng, n, low=0.1, high=10.0, exp_low=0.2, exp_high=2.0):
    """Log-uniform a, b, c and uniform alpha, beta."""
    rng = np.random.default_rng(rng)
    lu = lambda: np.exp(rng.uniform(np.log(low), np.log(high), n))
    a, b, c = lu(), lu(), lu()
    al, be = rng.uniform(exp_low, exp_high, n), rng.uniform(exp_low, exp_high, n)
    return [OdeParams(*vals) for vals in zip(a, b, c, al, be)]


def step4_moment_bound(p, gamma, t, C):
    """(1 + 2/(gamma t))^(p/gamma) + (C p)^(p/2), for m_2(f_0) = 1."""
    if p < 4:
        raise ValueError("step4_moment_bound needs p >= 4")
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("step4_moment_bound needs t > 0")
    return (1.0 + 2.0 / (gamma * t)) ** (p / gamma) + (C * p) ** (p / 2.0)


def fit_step4_constant(p, gamma, t, m_p):
    """Smallest C >= floor with m_p <= step4_moment_bound(p, gamma, t, C)."""
    excess = m_p - (1.0 + 2.0 / (gamma * t)) ** (p / gamma)
    if excess <= 0:
        return C_FLOOR
    return max(C_FLOOR, excess ** (2.0 / p) / p)


def fit_gaussian_shape(times, values, gamma):
    """Smallest C with values <= C exp(C t^(-2/gamma)) at every time.

    The bound is increasing in C, so bisection in log C over [1e-6, 1e6].
    """
    times = np.asarray(times, dtype=float)
    logv = np.log(np.asarray(values, dtype=float))
    s = times ** (-2.0 / gamma)
    ok = lambda C: np.all(logv <= np.log(C) + C * s)
    lo, hi = np.log(C_FLOOR), np.log(1e6)
    if ok(np.exp(lo)):
        return C_FLOOR
    if not ok(np.exp(hi)):
        return float("inf")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ok(np.exp(mid)):
            hi = mid
        else:
            lo = mid
    return float(np.exp(hi))
