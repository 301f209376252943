"""Weighted transport costs c_{p,eps} and exact discrete optimal transport.

    phi_eps(r)      = r / (1 + eps r)
    c_{p,eps}(v, w) = (1 + |v|^p + |w|^p) phi_eps(|v - w|^2)

T_{p,eps}(F, G) is the minimum of sum_ij R_ij c(v_i, w_j) over couplings R of
two discrete measures. Uniform equal-size inputs go through an assignment
solver, general weights through the transportation LP.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from .kernel import abs_pow, norm

WEIGHT_TOL = 1e-12
BRUTE_FORCE_MAX = 8
ASSIGNMENT_CAP = 5000       # points per side for the assignment solver
LP_CAP = 1_000_000          # support pairs n * m for the transportation LP


class SolverCapError(ValueError):
    """The instance is larger than the configured solver cap."""


@dataclass(frozen=True)
class CostParams:
    p: float
    eps: float

    def __post_init__(self):
        if not self.p >= 2.0:
            raise ValueError(f"cost requires p >= 2, got {self.p}")
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError(f"cost requires eps in [0, 1], got {self.eps}")


@dataclass
class DiscreteMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.points.shape[-1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {self.points.shape}")
        if len(self.weights) != len(self.points):
            raise ValueError("points and weights differ in length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")
        if np.any(self.weights < 0.0):
            raise ValueError("weights must be nonnegative")
        total = math.fsum(self.weights)
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {total!r}, not 1")

    @classmethod
    def uniform(cls, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        return cls(points, np.full(n, 1.0 / n))

    @property
    def n(self):
        return len(self.points)

    def is_uniform(self):
        return bool(np.all(self.weights == self.weights[0]))


def phi_eps(r, eps):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0.0):
        raise ValueError("phi_eps requires r >= 0")
    if np.any(np.asarray(eps) < 0.0):
        raise ValueError("phi_eps requires eps >= 0")
    return r / (1.0 + eps * r)


def dphi_eps(r, eps):
    return (1.0 + eps * np.asarray(r, dtype=float)) ** -2


def d2phi_eps(r, eps):
    return -2.0 * eps * (1.0 + eps * np.asarray(r, dtype=float)) ** -3


def weight(v, w, p):
    """The prefactor 1 + |v|^p + |w|^p."""
    return 1.0 + abs_pow(norm(v), p) + abs_pow(norm(w), p)


def cost(v, w, params):
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    d = v - w
    return weight(v, w, params.p) * phi_eps(np.sum(d * d, axis=-1), params.eps)


def cost_matrix(X, Y, params):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    return cost(X[:, None, :], Y[None, :, :], params)


def _check_finite_sum(value):
    if not math.isfinite(value):
        raise ValueError("transport cost is not finite; eps = 0 needs finite (p+2)-moments")
    return value


def assignment_value(C, perm):
    """Mean of C[i, perm[i]], summed in row order.

    Both the solver and the brute-force oracle evaluate permutations through
    this function so equal permutations give bitwise-equal values.
    """
    n = len(perm)
    return float(np.sum(C[np.arange(n), perm])) / n


def optimal_assignment(C):
    """Exact optimal permutation for an n x n cost matrix."""
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(len(rows), dtype=int)
    perm[rows] = cols
    return perm


def _transport_lp(C, a, b):
    n, m = C.shape
    rows = sparse.kron(sparse.eye(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.eye(m))
    A_eq = sparse.vstack([rows, cols]).tocsc()
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]),
                  bounds=(0.0, None), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = np.clip(res.x.reshape(n, m), 0.0, None)
    return float(np.sum(plan * C)), plan


def _uniform_square(n, m, a, b):
    return n == m and np.all(a == a[0]) and np.all(b == b[0])


def check_solver_cap(n, m, a=None, b=None, assignment_cap=ASSIGNMENT_CAP, lp_cap=LP_CAP):
    """Raise :class:`SolverCapError` when an n x m instance exceeds the solver caps."""
    uniform = a is None or _uniform_square(n, m, np.asarray(a), np.asarray(b))
    if uniform and n == m:
        if n > assignment_cap:
            raise SolverCapError(f"{n} points exceed the assignment cap {assignment_cap}")
    elif n * m > lp_cap:
        raise SolverCapError(f"{n} x {m} support exceeds the transport LP cap {lp_cap}")


def solve_transport(C, a, b):
    """Exact discrete optimal transport for cost matrix ``C``.

    Returns ``(value, plan)`` where ``plan`` has marginals ``a`` and ``b``.
    """
    C = np.asarray(C, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, m = C.shape
    if _uniform_square(n, m, a, b):
        perm = optimal_assignment(C)
        plan = np.zeros((n, n))
        plan[np.arange(n), perm] = 1.0 / n
        return assignment_value(C, perm), plan
    return _transport_lp(C, a, b)


def optimal_cost(F, G, params):
    """T_{p,eps}(F, G) and an optimal coupling."""
    value, plan = solve_transport(cost_matrix(F.points, G.points, params), F.weights, G.weights)
    return _check_finite_sum(value), plan


def brute_force_cost(F, G, params):
    """Minimum over all n! pairings; uniform equal-size measures, n <= 8."""
    if F.n != G.n:
        raise ValueError("brute force needs equal sizes")
    if F.n > BRUTE_FORCE_MAX:
        raise ValueError(f"brute force limited to n <= {BRUTE_FORCE_MAX}, got {F.n}")
    if not (F.is_uniform() and G.is_uniform()):
        raise ValueError("brute force needs uniform weights")
    C = cost_matrix(F.points, G.points, params)
    best = math.inf
    for perm in itertools.permutations(range(F.n)):
        best = min(best, assignment_value(C, np.array(perm)))
    return _check_finite_sum(best)


def brute_force_power(F, G, p):
    """Brute-force minimum of the mean |v - w|^p over pairings."""
    if F.n != G.n or F.n > BRUTE_FORCE_MAX:
        raise ValueError("brute force needs equal sizes n <= 8")
    D = abs_pow(norm(F.points[:, None, :] - G.points[None, :, :]), p)
    return min(assignment_value(D, np.array(perm))
               for perm in itertools.permutations(range(F.n)))


def wasserstein_p(F, G, p):
    if p < 1.0:
        raise ValueError("wasserstein_p requires p >= 1")
    D = abs_pow(norm(F.points[:, None, :] - G.points[None, :, :]), p)
    value, _ = solve_transport(D, F.weights, G.weights)
    return max(value, 0.0) ** (1.0 / p)


def rti_ratios(v, w, y, params):
    """c(v, y) / (c(v, w) + c(w, y)) for each sampled triple (0 when both vanish)."""
    num = cost(v, y, params)
    den = cost(v, w, params) + cost(w, y, params)
    return np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)


def sample_triples(rng, samples, scale=3.0, heavy_tail=2.6):
    """Random (v, w, y) triples: half Gaussian, half with Pareto radii."""
    pts = rng.standard_normal((3, samples, 3)) * scale
    heavy = rng.random(samples) < 0.5
    dirs = rng.standard_normal((3, samples, 3))
    dirs /= norm(dirs)[..., None]
    radii = scale * (1.0 + rng.pareto(heavy_tail, size=(3, samples)))
    pts[:, heavy] = (dirs * radii[..., None])[:, heavy]
    return pts[0], pts[1], pts[2]


def rti_constant_estimate(params, samples, rng=None, sampler=None):
    """Empirical lower bound on the best constant in the relaxed triangle inequality.

    ``sampler(rng, samples)`` must return three ``(samples, 3)`` arrays;
    the default mixes Gaussian and heavy-tailed points.
    """
    if samples < 10_000:
        raise ValueError("rti_constant_estimate needs at least 1e4 samples")
    rng = np.random.default_rng(rng)
    sampler = sampler or sample_triples
    v, w, y = sampler(rng, samples)
    ratio = float(np.max(rti_ratios(v, w, y, params)))
    if not math.isfinite(ratio):
        raise ValueError("relaxed triangle ratio is not finite")
    return ratio
