"""Weak-form generator L, coupling generator A and the cost decomposition.

For a test function phi on R^3,

    L phi(v, v*) = 1/2 sum_kl a_kl(v - v*) d2_kl phi(v) + sum_k b_k(v - v*) d_k phi(v).

For psi on R^3 x R^3 and a quadruple (v, v*, vt, vt*), A psi adds the
drift and diffusion of both components plus the cross term
sum_jkl sigma_kj(v - v*) sigma_lj(vt - vt*) d2 psi / dv_k dvt_l.

Applied to the cost psi = c_{p,eps}, A splits exactly into five terms
k1, k2, k2~, k3, k3~ plus a remainder carrying phi_eps'' <= 0. The same
module provides the sampled checks of the central inequality bounding
A c_{p,eps} and of its intermediate steps.
"""

from dataclasses import dataclass

import numpy as np

from .kernel import (a_matrix, abs_pow, b_vector, check_gamma, frobenius, norm,
                     sigma_apply, sigma_matrix)
from .transport import CostParams, cost, d2phi_eps, dphi_eps, phi_eps, weight

C_FLOOR = 1e-6
C_CEIL = 1e6
BISECT_ITERS = 60
CHECK_RTOL = 1e-9


# --------------------------------------------------------------------------
# test functions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """A C^2 function on R^3 with its gradient and Hessian.

    Each callable maps an array of shape (..., 3) to shapes (...), (..., 3)
    and (..., 3, 3) respectively.
    """
    value: object
    grad: object
    hess: object
    name: str = "phi"

    __test__ = False


@dataclass(frozen=True)
class PairTestFunction:
    """A C^2 function psi(v, w) on R^3 x R^3 with all first and second derivatives.

    ``hess_vw[..., k, l]`` is the mixed derivative d2 psi / dv_k dw_l.
    """
    value: object
    grad_v: object
    grad_w: object
    hess_vv: object
    hess_ww: object
    hess_vw: object
    name: str = "psi"

    __test__ = False


def monomial(p):
    """phi(v) = |v|^p, p >= 2."""
    if p < 2:
        raise ValueError("monomial test function needs p >= 2")

    def value(v):
        return abs_pow(norm(v), p)

    def grad(v):
        return p * abs_pow(norm(v), p - 2)[..., None] * np.asarray(v, dtype=float)

    def hess(v):
        v = np.asarray(v, dtype=float)
        r = norm(v)
        u = v / np.where(r > 0, r, 1.0)[..., None]
        # |v|^(p-4) v v^T written as |v|^(p-2) u u^T, which is 0 at v = 0
        rp2 = abs_pow(r, p - 2)[..., None, None]
        return p * rp2 * (np.eye(3) + (p - 2) * u[..., :, None] * u[..., None, :])

    return TestFunction(value, grad, hess, name=f"|v|^{p:g}")


def coordinate(k):
    """phi(v) = v_k."""
    e = np.zeros(3)
    e[k] = 1.0

    def value(v):
        return np.asarray(v, dtype=float)[..., k]

    def grad(v):
        return np.broadcast_to(e, np.shape(v)).copy()

    def hess(v):
        return np.zeros(np.shape(v)[:-1] + (3, 3))

    return TestFunction(value, grad, hess, name=f"v_{k + 1}")


def bounded_test_functions():
    """A small family of C^2_b test functions (bounded with bounded derivatives)."""
    kvec = np.array([0.7, -0.4, 1.1])

    def bump_v(v):
        return np.exp(-0.5 * np.sum(np.asarray(v) ** 2, axis=-1))

    def bump_g(v):
        return -bump_v(v)[..., None] * np.asarray(v)

    def bump_h(v):
        v = np.asarray(v)
        return bump_v(v)[..., None, None] * (v[..., :, None] * v[..., None, :] - np.eye(3))

    def wave_v(v):
        return np.cos(np.asarray(v) @ kvec)

    def wave_g(v):
        return -np.sin(np.asarray(v) @ kvec)[..., None] * kvec

    def wave_h(v):
        return -np.cos(np.asarray(v) @ kvec)[..., None, None] * np.outer(kvec, kvec)

    def lor_v(v):
        return 1.0 / (1.0 + np.sum(np.asarray(v) ** 2, axis=-1))

    def lor_g(v):
        return -2.0 * lor_v(v)[..., None] ** 2 * np.asarray(v)

    def lor_h(v):
        v = np.asarray(v)
        f = lor_v(v)[..., None, None]
        return 8.0 * f ** 3 * v[..., :, None] * v[..., None, :] - 2.0 * f ** 2 * np.eye(3)

    return [TestFunction(bump_v, bump_g, bump_h, "gaussian bump"),
            TestFunction(wave_v, wave_g, wave_h, "plane wave"),
            TestFunction(lor_v, lor_g, lor_h, "lorentzian")]


def lift_first(phi):
    """psi(v, w) = phi(v)."""
    zero3 = lambda v, w: np.zeros(np.broadcast_shapes(np.shape(v), np.shape(w)))
    zero33 = lambda v, w: np.zeros(np.broadcast_shapes(np.shape(v), np.shape(w)) + (3,))
    return PairTestFunction(
        value=lambda v, w: phi.value(v),
        grad_v=lambda v, w: phi.grad(v),
        grad_w=zero3,
        hess_vv=lambda v, w: phi.hess(v),
        hess_ww=zero33,
        hess_vw=zero33,
        name=f"{phi.name}(v)")


def lift_sum(phi):
    """psi(v, w) = phi(v) + phi(w)."""
    zero33 = lambda v, w: np.zeros(np.broadcast_shapes(np.shape(v), np.shape(w)) + (3,))
    return PairTestFunction(
        value=lambda v, w: phi.value(v) + phi.value(w),
        grad_v=lambda v, w: phi.grad(v),
        grad_w=lambda v, w: phi.grad(w),
        hess_vv=lambda v, w: phi.hess(v),
        hess_ww=lambda v, w: phi.hess(w),
        hess_vw=zero33,
        name=f"{phi.name}(v)+{phi.name}(w)")


def squared_distance():
    eye = np.eye(3)

    def hess(v, w, sign=1.0):
        shape = np.broadcast_shapes(np.shape(v), np.shape(w))[:-1]
        return np.broadcast_to(sign * 2.0 * eye, shape + (3, 3)).copy()

    return PairTestFunction(
        value=lambda v, w: np.sum((np.asarray(v) - w) ** 2, axis=-1),
        grad_v=lambda v, w: 2.0 * (np.asarray(v) - w),
        grad_w=lambda v, w: 2.0 * (np.asarray(w) - v),
        hess_vv=hess,
        hess_ww=hess,
        hess_vw=lambda v, w: hess(v, w, -1.0),
        name="|v-w|^2")


def cost_function(p, eps):
    """psi = c_{p,eps} with analytic first and second derivatives."""
    params = CostParams(p, eps)

    def parts(v, w):
        v = np.asarray(v, dtype=float)
        w = np.asarray(w, dtype=float)
        d = v - w
        r = np.sum(d * d, axis=-1)
        W = weight(v, w, p)
        return v, w, d, W, phi_eps(r, eps), dphi_eps(r, eps), d2phi_eps(r, eps)

    def unit_and_pow(v):
        rv = norm(v)
        u = v / np.where(rv > 0, rv, 1.0)[..., None]
        return u, abs_pow(rv, p - 2)

    def value(v, w):
        return cost(v, w, params)

    def grad_v(v, w):
        v, w, d, W, f, f1, _ = parts(v, w)
        return (p * abs_pow(norm(v), p - 2) * f)[..., None] * v + 2.0 * (W * f1)[..., None] * d

    def grad_w(v, w):
        return grad_v(w, v)

    def hess_vv(v, w):
        v, w, d, W, f, f1, f2 = parts(v, w)
        u, rp2 = unit_and_pow(v)
        eye = np.eye(3)
        outer = lambda a, b: a[..., :, None] * b[..., None, :]
        H = (p * rp2 * f)[..., None, None] * eye
        H = H + (p * (p - 2) * rp2 * f)[..., None, None] * outer(u, u)
        H = H + (2 * p * rp2 * f1)[..., None, None] * (outer(v, d) + outer(d, v))
        H = H + (2.0 * W * f1)[..., None, None] * eye
        H = H + (4.0 * W * f2)[..., None, None] * outer(d, d)
        return H

    def hess_ww(v, w):
        return hess_vv(w, v)

    def hess_vw(v, w):
        v, w, d, W, f, f1, f2 = parts(v, w)
        eye = np.eye(3)
        outer = lambda a, b: a[..., :, None] * b[..., None, :]
        pv = abs_pow(norm(v), p - 2)
        pw = abs_pow(norm(w), p - 2)
        H = (-2 * p * pv * f1)[..., None, None] * outer(v, d)
        H = H + (2 * p * pw * f1)[..., None, None] * outer(d, w)
        H = H - (4.0 * W * f2)[..., None, None] * outer(d, d)
        H = H - (2.0 * W * f1)[..., None, None] * eye
        return H

    return PairTestFunction(value, grad_v, grad_w, hess_vv, hess_ww, hess_vw,
                            name=f"c_{{{p:g},{eps:g}}}")


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------

@dataclass
class Quadruple:
    """Arrays of shape (..., 3) for (v, v*, vt, vt*)."""
    v: np.ndarray
    vs: np.ndarray
    vt: np.ndarray
    vts: np.ndarray

    def __post_init__(self):
        self.v, self.vs, self.vt, self.vts = (np.asarray(a, dtype=float) for a in
                                              (self.v, self.vs, self.vt, self.vts))

    @property
    def x(self):
        return self.v - self.vs

    @property
    def xt(self):
        return self.vt - self.vts

    def swapped(self):
        """The quadruple (vt, vt*, v, v*)."""
        return Quadruple(self.vt, self.vts, self.v, self.vs)

    def __len__(self):
        return len(self.v)

    def take(self, idx):
        return Quadruple(self.v[idx], self.vs[idx], self.vt[idx], self.vts[idx])


def L_apply(phi, v, vs, gamma):
    """L phi(v, v*) for a TestFunction ``phi``."""
    x = np.asarray(v, dtype=float) - vs
    drift = np.sum(b_vector(x, gamma) * phi.grad(v), axis=-1)
    return drift + 0.5 * frobenius(a_matrix(x, gamma), phi.hess(v))


def L_moment_monomial(p, v, vs, gamma):
    """Closed form of L applied to |v|^p.

    Uses |v|^(p-4) |sigma(x) v|^2 = |v|^(p-2) |sigma(x) v/|v||^2 so that the
    v = 0 limit is taken without 0 * inf.
    """
    gamma = check_gamma(gamma)
    v = np.asarray(v, dtype=float)
    x = v - vs
    r = norm(v)
    u = v / np.where(r > 0, r, 1.0)[..., None]
    rp2 = abs_pow(r, p - 2)
    vb = np.sum(v * b_vector(x, gamma), axis=-1)
    sig2 = 2.0 * abs_pow(norm(x), gamma + 2)
    su = sigma_apply(x, u, gamma)
    return rp2 * (p * vb + 0.5 * p * sig2 + 0.5 * p * (p - 2) * np.sum(su * su, axis=-1))


def _A_terms(psi, q, gamma):
    v, vt = q.v, q.vt
    x, xt = q.x, q.xt
    S, St = sigma_matrix(x, gamma), sigma_matrix(xt, gamma)
    terms = (
        np.sum(b_vector(x, gamma) * psi.grad_v(v, vt), axis=-1),
        np.sum(b_vector(xt, gamma) * psi.grad_w(v, vt), axis=-1),
        0.5 * frobenius(a_matrix(x, gamma), psi.hess_vv(v, vt)),
        0.5 * frobenius(a_matrix(xt, gamma), psi.hess_ww(v, vt)),
        frobenius(S @ np.swapaxes(St, -1, -2), psi.hess_vw(v, vt)),
    )
    return terms


def A_apply(psi, q, gamma, return_scale=False):
    """A psi at the quadruple ``q``.

    With ``return_scale`` also returns the sum of absolute values of the five
    contributions, the natural magnitude for relative tolerances.
    """
    terms = _A_terms(psi, q, check_gamma(gamma))
    total = sum(terms)
    if return_scale:
        return total, sum(np.abs(t) for t in terms)
    return total


def fd_pair_derivatives(value, v, w, h):
    """Central finite-difference gradient and Hessian of value(v, w) on R^6.

    ``h`` is an array of per-sample step sizes (shape ``(...)``).
    """
    z = np.concatenate([np.asarray(v, float), np.asarray(w, float)], axis=-1)
    h = np.asarray(h, dtype=float)[..., None]
    f = lambda zz: value(zz[..., :3], zz[..., 3:])
    eye = np.eye(6)
    f0 = f(z)
    grad = np.empty(z.shape)
    hess = np.empty(z.shape + (6,))
    fp = [f(z + h * eye[i]) for i in range(6)]
    fm = [f(z - h * eye[i]) for i in range(6)]
    hh = h[..., 0]
    for i in range(6):
        grad[..., i] = (fp[i] - fm[i]) / (2 * hh)
        hess[..., i, i] = (fp[i] - 2 * f0 + fm[i]) / hh ** 2
        for j in range(i + 1, 6):
            ei, ej = h * eye[i], h * eye[j]
            val = (f(z + ei + ej) - f(z + ei - ej) - f(z - ei + ej) + f(z - ei - ej)) / (4 * hh ** 2)
            hess[..., i, j] = hess[..., j, i] = val
    return grad, hess


def fd_pair_function(value, h_rel=1e-4):
    """Wrap a bare value function into a PairTestFunction via finite differences."""
    cache = {}

    def derivs(v, w):
        key = (id(v), id(w))
        if key not in cache:
            h = h_rel * (1.0 + norm(v) + norm(w))
            cache.clear()
            cache[key] = fd_pair_derivatives(value, v, w, h)
        return cache[key]

    return PairTestFunction(
        value=value,
        grad_v=lambda v, w: derivs(v, w)[0][..., :3],
        grad_w=lambda v, w: derivs(v, w)[0][..., 3:],
        hess_vv=lambda v, w: derivs(v, w)[1][..., :3, :3],
        hess_ww=lambda v, w: derivs(v, w)[1][..., 3:, 3:],
        hess_vw=lambda v, w: derivs(v, w)[1][..., :3, 3:],
        name="finite differences")


def A_apply_fd(value, q, gamma, h_rel=1e-4, return_scale=False):
    """A psi with all derivatives of ``value`` taken by central differences."""
    return A_apply(fd_pair_function(value, h_rel), q, gamma, return_scale=return_scale)


# --------------------------------------------------------------------------
# decomposition of A c_{p,eps}
# --------------------------------------------------------------------------

@dataclass
class KTerms:
    k1: np.ndarray
    k2: np.ndarray
    k2t: np.ndarray
    k3: np.ndarray
    k3t: np.ndarray
    remainder: np.ndarray

    @property
    def total(self):
        return self.k1 + self.k2 + self.k2t + self.k3 + self.k3t

    def as_tuple(self):
        return self.k1, self.k2, self.k2t, self.k3, self.k3t


def k_terms(p, eps, q, gamma):
    """The five terms of the cost decomposition plus the phi'' remainder.

    A c_{p,eps}(q) = k1 + k2 + k2~ + k3 + k3~ + remainder exactly, and the
    remainder is <= 0.
    """
    gamma = check_gamma(gamma)
    v, vs, vt, vts = q.v, q.vs, q.vt, q.vts
    x, xt = q.x, q.xt
    d = v - vt
    r = np.sum(d * d, axis=-1)
    W = weight(v, vt, p)
    f, f1, f2 = phi_eps(r, eps), dphi_eps(r, eps), d2phi_eps(r, eps)
    # the difference is formed entrywise so near-coincident pairs keep their digits
    dS = sigma_matrix(x, gamma) - sigma_matrix(xt, gamma)
    db = b_vector(x, gamma) - b_vector(xt, gamma)
    dSd = np.einsum("...kl,...l->...k", dS, d)
    k1 = W * f1 * (2.0 * np.sum(d * db, axis=-1) + np.sum(dS * dS, axis=(-2, -1)))
    k2 = f * L_moment_monomial(p, v, vs, gamma)
    k2t = f * L_moment_monomial(p, vt, vts, gamma)
    # (sigma(xt) - sigma(x)) (vt - v) equals dSd, so both cross terms share it
    k3 = 2 * p * abs_pow(norm(v), p - 2) * f1 * np.sum(sigma_apply(x, v, gamma) * dSd, axis=-1)
    k3t = 2 * p * abs_pow(norm(vt), p - 2) * f1 * np.sum(sigma_apply(xt, vt, gamma) * dSd, axis=-1)
    remainder = 2.0 * W * np.sum(dSd * dSd, axis=-1) * f2
    return KTerms(k1, k2, k2t, k3, k3t, remainder)


def cost_generator(p, eps, q, gamma):
    """A c_{p,eps}(q) evaluated through the decomposition (numerically stable form)."""
    kt = k_terms(p, eps, q, gamma)
    return kt.total + kt.remainder


# --------------------------------------------------------------------------
# central inequality and its proof steps
# --------------------------------------------------------------------------

def _c(p, eps, a, b):
    return cost(a, b, CostParams(p, eps))


INEQUALITIES = ("cent", "i1", "i2p", "i3")


def inequality_parts(p, eps, q, gamma, keys=INEQUALITIES):
    """``{key: (lhs, base, coef)}`` with each inequality read as lhs <= base + C coef.

    ``cent`` is the central inequality for A c_{p,eps}. The proof steps are
    ``i1`` (k1 against 2 c_{p+g} plus the central coefficient), ``i2p`` (k2
    against the Povzner term -p |v|^(p+g) phi) and ``i3`` (k3 + k3~). Shared
    quantities are computed once.
    """
    gamma = check_gamma(gamma)
    if not 0.0 < eps <= 1.0:
        raise ValueError("central inequality needs eps in (0, 1]")
    pg = p + gamma
    se = np.sqrt(eps)
    kt = k_terms(p, eps, q, gamma)
    rv, rvs, rvt, rvts = (norm(a) for a in (q.v, q.vs, q.vt, q.vts))
    f = phi_eps(np.sum((q.v - q.vt) ** 2, axis=-1), eps)
    fs = phi_eps(np.sum((q.vs - q.vts) ** 2, axis=-1), eps)
    W_p = 1.0 + abs_pow(rv, p) + abs_pow(rvt, p)
    W_pg = 1.0 + abs_pow(rv, pg) + abs_pow(rvt, pg)
    Ws_p = 1.0 + abs_pow(rvs, p) + abs_pow(rvts, p)
    Ws_pg = 1.0 + abs_pow(rvs, pg) + abs_pow(rvts, pg)
    c_p, c_pg = W_p * f, W_pg * f
    cs_p, cs_pg = Ws_p * fs, Ws_pg * fs
    near = se * (Ws_p * c_pg + W_p * cs_pg)
    far = Ws_pg * c_p + W_pg * cs_p
    coef = near + far / se
    out = {}
    for key in keys:
        if key == "cent":
            out[key] = (kt.total + kt.remainder, (2.0 - p) * c_pg, coef)
        elif key == "i1":
            out[key] = (kt.k1, 2.0 * c_pg, coef)
        elif key == "i2p":
            out[key] = (kt.k2, -p * abs_pow(rv, pg) * f, (1.0 + abs_pow(rvs, pg)) * c_p)
        elif key == "i3":
            out[key] = (kt.k3 + kt.k3t, np.zeros_like(c_p), near + far)
        else:
            raise KeyError(f"unknown inequality {key!r}")
    return out


def cent_rhs_parts(p, eps, q, gamma):
    """Split the central-inequality right side as ``base + C * coef``.

    base is (2 - p) c_{p+g,eps}(v, vt); coef collects the four C-weighted lines.
    """
    _, base, coef = inequality_parts(p, eps, q, gamma, keys=("cent",))["cent"]
    return base, coef


def cent_rhs(p, eps, q, gamma, C):
    base, coef = cent_rhs_parts(p, eps, q, gamma)
    return base + C * coef


def step_bound_parts(p, eps, q, gamma):
    """(lhs, base, coef) for the intermediate inequalities ``i1``, ``i2p``, ``i3``."""
    return inequality_parts(p, eps, q, gamma, keys=("i1", "i2p", "i3"))


def g_chain_parts(q, gamma):
    """Constant-free sub-bounds of step 1 of the central proof as (lhs, rhs) pairs."""
    gamma = check_gamma(gamma)
    x, xt = q.x, q.xt
    d, ds = q.v - q.vt, q.vs - q.vts
    db = b_vector(x, gamma) - b_vector(xt, gamma)
    dS = sigma_matrix(x, gamma) - sigma_matrix(xt, gamma)
    rx, rxt = norm(x), norm(xt)
    gsum = abs_pow(rx, gamma) + abs_pow(rxt, gamma)
    nd, nds = norm(d), norm(ds)
    g1 = np.sum((x - xt) * db, axis=-1) + np.sum(dS * dS, axis=(-2, -1))
    g2 = np.sum(d * db, axis=-1)
    g3 = np.sum(ds * db, axis=-1)
    return {
        "g1": (g1, 2.0 * abs_pow(np.minimum(rx, rxt), gamma) * np.sum((x - xt) ** 2, axis=-1)),
        "g2": (g2, 2.0 * gsum * nd * nds),
        "g3": (g3, 2.0 * gsum * (nd * nds + nds ** 2)),
    }


def _violations(lhs, base, coef, C, rtol):
    rhs = base + C * coef
    tol = rtol * (np.abs(lhs) + np.abs(base) + C * np.abs(coef))
    return lhs - rhs > tol


def required_constant(lhs, base, coef, rtol=CHECK_RTOL, floor=C_FLOOR, ceil=C_CEIL,
                      iters=BISECT_ITERS):
    """Smallest C in [floor, ceil] with lhs <= base + C * coef on every sample.

    Bisection in log C; the returned value is the upper end of the final
    bracket so it always satisfies the predicate. Returns ``inf`` when even
    ``ceil`` fails.
    """
    lhs, base, coef = (np.asarray(a, dtype=float) for a in (lhs, base, coef))
    if np.any(_violations(lhs, base, coef, ceil, rtol)):
        return float("inf")
    if not np.any(_violations(lhs, base, coef, floor, rtol)):
        return floor
    lo, hi = np.log(floor), np.log(ceil)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.any(_violations(lhs, base, coef, np.exp(mid), rtol)):
            lo = mid
        else:
            hi = mid
    return float(np.exp(hi))


def count_violations(lhs, base, coef, C, rtol=CHECK_RTOL):
    """Number of samples with lhs > base + C * coef beyond the relative tolerance."""
    return int(np.count_nonzero(_violations(np.asarray(lhs), np.asarray(base),
                                            np.asarray(coef), C, rtol)))


def worst_violation(lhs, base, coef, C):
    """Index and size of the largest excess lhs - (base + C coef), or (None, 0)."""
    excess = np.asarray(lhs) - (np.asarray(base) + C * np.asarray(coef))
    i = int(np.argmax(excess))
    return (i, float(excess[i])) if excess[i] > 0 else (None, 0.0)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    """Mixture sampler for quadruples.

    ``weights`` are the probabilities of the Gaussian, heavy-tail and
    near-coincident components.
    """
    weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    scale: float = 1.0
    pareto_index: float = 2.6
    near_offset: float = 1e-6
    coincident_only: bool = False


def _random_points(rng, n, cfg, heavy):
    pts = rng.standard_normal((n, 3)) * cfg.scale
    dirs = rng.standard_normal((n, 3))
    dirs /= norm(dirs)[:, None]
    radii = cfg.scale * (1.0 + rng.pareto(cfg.pareto_index, size=n))
    return np.where(heavy[:, None], dirs * radii[:, None], pts)


def _unit(rng, n):
    u = rng.standard_normal((n, 3))
    return u / norm(u)[:, None]


def sample_quadruples(rng, n, cfg=SamplerConfig()):
    rng = np.random.default_rng(rng)
    if cfg.coincident_only:
        v = rng.standard_normal((n, 3))
        vs = rng.standard_normal((n, 3))
        return Quadruple(v, vs, v.copy(), vs.copy())
    w = np.asarray(cfg.weights, dtype=float)
    comp = rng.choice(3, size=n, p=w / w.sum())
    heavy = comp == 1
    pts = [_random_points(rng, n, cfg, heavy) for _ in range(4)]
    near = comp == 2
    pts[2] = np.where(near[:, None], pts[0] + cfg.near_offset * _unit(rng, n), pts[2])
    pts[3] = np.where(near[:, None], pts[1] + cfg.near_offset * _unit(rng, n), pts[3])
    return Quadruple(*pts)


def _chunks(total, size):
    while total > 0:
        yield min(size, total)
        total -= size


def _ratio(lhs, base, coef):
    """Constant needed by each sample: (lhs - base) / coef, -inf when none is needed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (lhs - base) / coef
    bad = (coef <= 0.0) & (lhs > base)
    return np.where(coef > 0.0, r, np.where(bad, np.inf, -np.inf))


def _stack(q):
    return np.stack([q.v, q.vs, q.vt, q.vts], axis=-2)


def _unstack(z):
    return Quadruple(z[..., 0, :], z[..., 1, :], z[..., 2, :], z[..., 3, :])


def refine_worst(parts_fn, q, top=32, proposals=16, iters=400, seed=0):
    """Push the worst sampled quadruples uphill in the required-constant ratio.

    ``parts_fn(q)`` returns ``(lhs, base, coef)``. The ``top`` samples with
    the largest ratio seed a vectorized stochastic hill climb with adaptive
    per-seed step sizes. Returns the climbed quadruples, which are pooled
    with the original draw before bisection.
    """
    rng = np.random.default_rng(seed)
    ratio = _ratio(*parts_fn(q))
    order = np.argsort(np.where(np.isfinite(ratio), -ratio, np.inf))[:top]
    z = _stack(q.take(order))
    best = ratio[order]
    k = len(order)
    step = 0.05 * (1.0 + np.abs(z).max(axis=(-2, -1)))
    for _ in range(iters):
        noise = rng.standard_normal((proposals, k, 4, 3))
        cand = z[None] + step[None, :, None, None] * noise
        r = _ratio(*parts_fn(_unstack(cand.reshape(-1, 4, 3)))).reshape(proposals, k)
        r = np.where(np.isfinite(r), r, -np.inf)
        j = np.argmax(r, axis=0)
        rj = r[j, np.arange(k)]
        up = rj > best
        z[up] = cand[j[up], np.nonzero(up)[0]]
        best[up] = rj[up]
        step = np.maximum(np.where(up, step * 1.2, step * 0.85), 1e-9)
    return _unstack(z)


def fit_constants(p, eps, gamma, sample_count, keys=INEQUALITIES,
                  sampler_config=SamplerConfig(), seed=42, chunk=100_000, refine=True):
    """Smallest sampled constant for each inequality in ``keys``.

    With ``refine`` the worst draws of each chunk are climbed uphill (see
    :func:`refine_worst`) and the climbed points join the sample, so the fit
    holds up on much larger fresh draws.
    """
    rng = np.random.default_rng(seed)
    refine = refine and not sampler_config.coincident_only
    best = dict.fromkeys(keys, C_FLOOR)
    for n in _chunks(sample_count, chunk):
        q = sample_quadruples(rng, n, sampler_config)
        for key, parts in inequality_parts(p, eps, q, gamma, keys).items():
            best[key] = max(best[key], required_constant(*parts))
            if refine:
                fn = lambda qq, key=key: inequality_parts(p, eps, qq, gamma, (key,))[key]
                best[key] = max(best[key], required_constant(*fn(refine_worst(fn, q, seed=seed))))
    return best


def validate_constants(p, eps, gamma, constants, sample_count, sampler_config=SamplerConfig(),
                       seed=7, chunk=100_000):
    """Violation counts and worst excess of fitted constants on fresh draws."""
    rng = np.random.default_rng(seed)
    report = {k: {"C": C, "samples": 0, "violations": 0, "max_violation": 0.0}
              for k, C in constants.items()}
    for n in _chunks(sample_count, chunk):
        q = sample_quadruples(rng, n, sampler_config)
        for key, (lhs, base, coef) in inequality_parts(p, eps, q, gamma, tuple(constants)).items():
            rec = report[key]
            rec["samples"] += n
            rec["violations"] += count_violations(lhs, base, coef, rec["C"])
            rec["max_violation"] = max(rec["max_violation"],
                                       worst_violation(lhs, base, coef, rec["C"])[1])
    return report


def fit_cent_constant(p, eps_grid, gamma_grid, sample_count, sampler_config=SamplerConfig(),
                      seed=42, chunk=100_000, refine=True):
    """Smallest C satisfying the central inequality on all drawn samples.

    The same C must work for every (eps, gamma) of the grids; pass singleton
    grids to fit one configuration. Deterministic in ``seed``.
    """
    if sample_count < 100_000 and not sampler_config.coincident_only:
        raise ValueError("fit_cent_constant needs at least 1e5 samples")
    best = C_FLOOR
    for gamma in np.atleast_1d(gamma_grid):
        for eps in np.atleast_1d(eps_grid):
            fit = fit_constants(p, float(eps), float(gamma), sample_count, ("cent",),
                                sampler_config, seed, chunk, refine)
            best = max(best, fit["cent"])
    return best


def cent_step_bounds(q, p, eps, gamma, C):
    """Per-step slack (min of rhs - lhs) and violation count for the proof steps.

    ``C`` is a float or a dict keyed like :func:`step_bound_parts`. The
    constant-free g-chains are included under ``g1``, ``g2``, ``g3``.
    """
    report = {}
    for key, (lhs, base, coef) in step_bound_parts(p, eps, q, gamma).items():
        Ck = C[key] if isinstance(C, dict) else C
        report[key] = {"C": Ck,
                       "min_slack": float(np.min(base + Ck * coef - lhs)),
                       "violations": count_violations(lhs, base, coef, Ck)}
    for key, (lhs, rhs) in g_chain_parts(q, gamma).items():
        report[key] = {"C": None,
                       "min_slack": float(np.min(rhs - lhs)),
                       "violations": count_violations(lhs, rhs, np.zeros_like(rhs), 0.0)}
    return report


def fit_step_constants(p, eps, gamma, sample_count, sampler_config=SamplerConfig(), seed=42,
                       chunk=100_000, refine=True):
    """Fitted constants for the intermediate inequalities i1, i2p, i3."""
    return fit_constants(p, eps, gamma, sample_count, ("i1", "i2p", "i3"), sampler_config,
                         seed, chunk, refine)


# --------------------------------------------------------------------------
# other sampled properties
# --------------------------------------------------------------------------

def conservation_residuals(v, vs, gamma):
    """L phi(v, v*) + L phi(v*, v) for phi in (v1, v2, v3, |v|^2), relative to scale."""
    out = {}
    for phi in [coordinate(0), coordinate(1), coordinate(2), monomial(2)]:
        a = L_apply(phi, v, vs, gamma)
        b = L_apply(phi, vs, v, gamma)
        out[phi.name] = np.abs(a + b) / (np.abs(a) + np.abs(b) + 1e-300)
    return out


def growth_constant(phi, v, vs, gamma):
    """max |L phi(v, v*)| / (1 + |v| + |v*|)^(2+g) over the samples."""
    val = np.abs(L_apply(phi, v, vs, gamma))
    return float(np.max(val / (1.0 + norm(v) + norm(vs)) ** (2.0 + gamma)))


def povzner_threshold(p, eps, gamma, rng=None, n_dirs=200, bounded_scale=1.0,
                      radii=np.geomspace(1.0, 1e4, 81)):
    """Smallest tested |v| beyond which A c_{p,eps} < 0 for all sampled configurations.

    The other three points are drawn from a Gaussian of width
    ``bounded_scale``; ``v`` moves outward along random directions. Returns
    ``inf`` if the sign never settles on the tested radii.
    """
    rng = np.random.default_rng(rng)
    dirs = _unit(rng, n_dirs)
    vs = rng.standard_normal((n_dirs, 3)) * bounded_scale
    vt = rng.standard_normal((n_dirs, 3)) * bounded_scale
    vts = rng.standard_normal((n_dirs, 3)) * bounded_scale
    negative = np.empty((len(radii), n_dirs), dtype=bool)
    for i, r in enumerate(radii):
        q = Quadruple(r * dirs, vs, vt, vts)
        negative[i] = cost_generator(p, eps, q, gamma) < 0.0
    all_neg = negative.all(axis=1)
    # last radius index where some direction was non-negative
    bad = np.nonzero(~all_neg)[0]
    if len(bad) == 0:
        return float(radii[0])
    if bad[-1] == len(radii) - 1:
        return float("inf")
    return float(radii[bad[-1] + 1])
