"""Sampled verification suites for identities and inequalities.

Every suite returns a list of check records::

    {"suite", "check", "samples", "violations", "max_violation", "worst_sample", ...}

``max_violation`` is the largest relative excess beyond the tolerance (0 when
none). A check passes when ``violations == 0``.
"""

import itertools

import numpy as np

from . import generators as gen
from .kernel import a_matrix, norm, proj_perp, sigma_inner, sigma_matrix
from .moments import comparison_ode_solution, ode_comparison_bound, random_ode_params
from .transport import (CostParams, DiscreteMeasure, brute_force_cost, cost, d2phi_eps, dphi_eps,
                        optimal_cost, phi_eps, rti_constant_estimate)

DEFAULT_TOL = 1e-10


def _record(suite, check, excess, scale, tol, samples=None, **extra):
    """Count samples where ``excess > tol * scale``.

    ``excess`` is lhs - rhs for an inequality or |lhs - rhs| for an identity.
    ``samples`` (optional) is an array of per-sample inputs for the dump.
    """
    excess = np.asarray(excess, dtype=float)
    scale = np.asarray(scale, dtype=float)
    bad = ~(excess <= tol * scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale > 0, excess / scale, np.where(excess > 0, np.inf, 0.0))
    rel = np.where(np.isnan(rel), np.inf, rel)
    n_bad = int(np.count_nonzero(bad))
    rec = {"suite": suite, "check": check, "samples": int(excess.size), "tolerance": tol,
           "violations": n_bad,
           "max_violation": float(np.max(np.where(bad, rel, 0.0))) if n_bad else 0.0,
           "worst_sample": None}
    if n_bad and samples is not None:
        i = int(np.argmax(np.where(bad, rel, -np.inf)))
        rec["worst_sample"] = np.asarray(samples)[i].tolist()
    rec.update(extra)
    return rec


def _merge(records):
    """Combine chunked records of the same check."""
    out = {}
    for r in records:
        key = (r["suite"], r["check"])
        if key not in out:
            out[key] = dict(r)
            continue
        m = out[key]
        m["samples"] += r["samples"]
        m["violations"] += r["violations"]
        if r["max_violation"] > m["max_violation"]:
            m["max_violation"] = r["max_violation"]
            m["worst_sample"] = r["worst_sample"]
        for k, v in r.items():
            if k.startswith("fitted_"):
                m[k] = max(m[k], v)
    return list(out.values())


def _vectors(rng, n):
    """Vectors with log-uniform magnitudes over four decades."""
    return rng.standard_normal((n, 3)) * 10.0 ** rng.uniform(-2, 2, (n, 1))


def _pairs(rng, n):
    """(x, xt) with 10% near-coincident pairs at relative offset 1e-3."""
    x, xt = _vectors(rng, n), _vectors(rng, n)
    near = rng.random(n) < 0.1
    xt[near] = x[near] * (1.0 + 1e-3 * rng.standard_normal((int(near.sum()), 3)))
    return x, xt


def _gammas(rng, n):
    return 1.0 - rng.random(n)  # (0, 1]


def kernel_suite(samples=1_000_000, seed=0, tol=DEFAULT_TOL, chunk=200_000):
    """Closed-form identities and inequalities of the collision coefficients."""
    rng = np.random.default_rng(seed)
    recs = []
    for n in gen._chunks(samples, chunk):
        x, xt = _pairs(rng, n)
        g = _gammas(rng, n)
        dump = np.column_stack([x, xt, g])
        r, rt = norm(x), norm(xt)
        A = a_matrix(x, g)
        S = sigma_matrix(x, g)
        St = sigma_matrix(xt, g)
        fro = lambda M: np.sqrt(np.sum(M * M, axis=(-2, -1)))
        recs.append(_record("kernel", "sigma^2 = a", fro(S @ S - A), fro(A), tol, dump))
        tr_ref = 2.0 * r ** (g + 2.0)
        recs.append(_record("kernel", "trace a = 2|x|^(g+2)",
                            np.abs(np.trace(A, axis1=-2, axis2=-1) - tr_ref), tr_ref, tol, dump))
        Ax = np.einsum("nkl,nl->nk", A, x)
        recs.append(_record("kernel", "a(x) x = 0", norm(Ax), fro(A) * r, tol, dump))
        b = -2.0 * (r ** g)[:, None] * x
        bt = -2.0 * (rt ** g)[:, None] * xt
        dx = norm(x - xt)
        lhs = norm(b - bt)
        rhs = 2.0 * (r ** g + rt ** g) * dx
        recs.append(_record("kernel", "drift Lipschitz bound", lhs - rhs, lhs + rhs, tol, dump))
        dS = S - St
        l3 = np.sum(dS * dS, axis=(-2, -1))
        mid = 2.0 * np.sum(((r ** (g / 2))[:, None] * x - (rt ** (g / 2))[:, None] * xt) ** 2, axis=1)
        r4 = 2.0 * (r ** (g / 2) + rt ** (g / 2)) ** 2 * dx ** 2
        recs.append(_record("kernel", "diffusion difference bound", l3 - mid, l3 + mid, tol, dump))
        recs.append(_record("kernel", "diffusion chain bound", mid - r4, mid + r4, tol, dump))
        inner = np.sum(S * St, axis=(-2, -1))
        closed = sigma_inner(x, xt, g)
        recs.append(_record("kernel", "sigma inner closed form", np.abs(inner - closed),
                            np.abs(inner) + np.abs(closed), tol, dump))
        low = 2.0 * r ** (g / 2) * rt ** (g / 2) * np.sum(x * xt, axis=1)
        recs.append(_record("kernel", "sigma inner lower bound", low - inner,
                            np.abs(low) + np.abs(inner), tol, dump))
        # power-difference inequality with alpha in (0, 1)
        av, bv = 10.0 ** rng.uniform(-3, 3, n), 10.0 ** rng.uniform(-3, 3, n)
        av[: n // 20] = 0.0
        al = rng.uniform(0.0, 1.0, n)
        al = np.where(al == 0.0, 0.5, al)
        lhs = np.abs(av ** al - bv ** al)
        rhs = np.maximum(av, bv) ** (al - 1.0) * np.abs(av - bv)
        recs.append(_record("kernel", "power difference bound", lhs - rhs, lhs + rhs, tol,
                            np.column_stack([av, bv, al])))
        # sigma(v - v*) v = sigma(v - v*) v*
        v, vs = _vectors(rng, n), _vectors(rng, n)
        xv = v - vs
        Sv = sigma_matrix(xv, g)
        s1 = np.einsum("nkl,nl->nk", Sv, v)
        s2 = np.einsum("nkl,nl->nk", Sv, vs)
        dump2 = np.column_stack([v, vs, g])
        recs.append(_record("kernel", "sigma(v-v*) v = sigma(v-v*) v*", norm(s1 - s2),
                            fro(Sv) * (norm(v) + norm(vs)), tol, dump2))
        rx = norm(xv)
        bound = rx ** (g / 2) * norm(v) * norm(vs)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(bound > 0, norm(s1) / bound, 0.0)
        recs.append(_record("kernel", "|sigma(v-v*) v| <= 2 |x|^(g/2) |v| |v*|",
                            norm(s1) - 2.0 * bound, norm(s1) + 2.0 * bound, tol, dump2,
                            fitted_constant=float(np.max(ratio))))
        # projector properties on nonzero x
        P = proj_perp(x)
        recs.append(_record("kernel", "projector idempotent", fro(P @ P - P), np.ones(n), 1e-12, dump))
        recs.append(_record("kernel", "projector symmetric", fro(P - np.swapaxes(P, 1, 2)),
                            np.ones(n), 1e-12, dump))
        recs.append(_record("kernel", "projector annihilates x",
                            norm(np.einsum("nkl,nl->nk", P, x)) / r, np.ones(n), 1e-12, dump))
        recs.append(_record("kernel", "projector trace 2",
                            np.abs(np.trace(P, axis1=1, axis2=2) - 2.0), np.ones(n), 1e-12, dump))
    return _merge(recs)


# --------------------------------------------------------------------------

def ito_suite(samples=100_000, fd_samples=10_000, p_list=(2.0, 2.5, 3.0, 4.0),
              eps_list=(0.0, 0.05, 0.25, 1.0), gamma_list=(0.5, 1.0), seed=1, tol=1e-8,
              fd_tol=1e-4, fd_step=1e-4):
    """Exact decomposition of A c_{p,eps}, the remainder sign and a finite-difference oracle.

    The decomposition is compared with a relative scale equal to the sum of
    the absolute values of the five generator contributions.
    """
    rng = np.random.default_rng(seed)
    configs = list(itertools.product(p_list, eps_list, gamma_list))
    counts = np.diff(np.linspace(0, samples, len(configs) + 1).astype(int))
    fd_counts = np.diff(np.linspace(0, fd_samples, len(configs) + 1).astype(int))
    recs = []
    for (p, eps, g), per, per_fd in zip(configs, counts, fd_counts):
        psi = gen.cost_function(p, eps)
        q = gen.sample_quadruples(rng, per)
        dump = gen._stack(q).reshape(len(q), -1)
        A, scale = gen.A_apply(psi, q, g, return_scale=True)
        kt = gen.k_terms(p, eps, q, g)
        tag = dict(p=p, eps=eps, gamma=g)
        recs.append(_record("ito", "A c - sum k = remainder", np.abs(A - kt.total - kt.remainder),
                            scale + np.abs(kt.remainder), tol, dump, **tag))
        recs.append(_record("ito", "remainder <= 0", kt.remainder, np.abs(kt.total), tol, dump, **tag))
        recs.append(_record("ito", "sum k >= A c", A - kt.total, scale, tol, dump, **tag))
        qf = gen.Quadruple(*rng.uniform(-10, 10, (4, per_fd, 3)))
        Af, _ = gen.A_apply_fd(psi.value, qf, g, h_rel=fd_step, return_scale=True)
        Aa, sa = gen.A_apply(psi, qf, g, return_scale=True)
        recs.append(_record("ito", "analytic A = finite-difference A", np.abs(Af - Aa), sa, fd_tol,
                            gen._stack(qf).reshape(per_fd, -1), **tag))
    return _summarize(recs, ("suite", "check"))


def _summarize(recs, keys):
    """Fold per-configuration records into one per check, keeping the worst configuration."""
    out = {}
    for r in recs:
        k = tuple(r[x] for x in keys)
        if k not in out:
            out[k] = dict(r, configurations=1)
            continue
        m = out[k]
        m["samples"] += r["samples"]
        m["violations"] += r["violations"]
        m["configurations"] += 1
        if r["max_violation"] > m["max_violation"]:
            m.update({x: r[x] for x in r if x not in ("samples", "violations", "configurations")})
    return list(out.values())


# --------------------------------------------------------------------------

def cent_suite(p_list=(2.5, 3.0, 4.0), gamma_list=(0.5, 1.0), eps_list=(0.05, 0.25, 1.0),
               fit_samples=100_000, validate_samples=1_000_000, seed=42, validate_seed=7,
               keys=gen.INEQUALITIES):
    """Fit each constant on ``fit_samples`` and count violations on fresh draws."""
    recs = []
    for p, g, eps in itertools.product(p_list, gamma_list, eps_list):
        fitted = gen.fit_constants(p, eps, g, fit_samples, keys, seed=seed)
        report = gen.validate_constants(p, eps, g, fitted, validate_samples, seed=validate_seed)
        q = gen.sample_quadruples(np.random.default_rng(validate_seed + 1), 20_000)
        chains = gen.g_chain_parts(q, g)
        for key, rep in report.items():
            recs.append({"suite": "cent", "check": key, "p": p, "gamma": g, "eps": eps,
                         "fitted_constant": rep["C"], "samples": rep["samples"],
                         "fit_samples": fit_samples, "violations": rep["violations"],
                         "max_violation": rep["max_violation"], "worst_sample": None})
        for key, (lhs, rhs) in chains.items():
            recs.append(_record("cent", key, lhs - rhs, np.abs(lhs) + np.abs(rhs), 1e-10,
                                gen._stack(q).reshape(len(q), -1), p=p, gamma=g, eps=eps))
    return recs


# --------------------------------------------------------------------------

def conservation_suite(samples=1_000_000, seed=2, gamma_list=(0.25, 0.5, 1.0), tol=1e-10):
    """L phi(v, v*) + L phi(v*, v) = 0 for the collision invariants."""
    rng = np.random.default_rng(seed)
    recs = []
    per = max(1, samples // len(gamma_list))
    for g in gamma_list:
        for n in gen._chunks(per, 200_000):
            v, vs = _vectors(rng, n), _vectors(rng, n)
            dump = np.column_stack([v, vs])
            for phi in (gen.coordinate(0), gen.coordinate(1), gen.coordinate(2), gen.monomial(2)):
                a = gen.L_apply(phi, v, vs, g)
                b = gen.L_apply(phi, vs, v, g)
                recs.append(_record("conservation", f"L {phi.name} antisymmetric", np.abs(a + b),
                                    np.abs(a) + np.abs(b), tol, dump, gamma=g))
    return _summarize(_merge(recs), ("suite", "check"))


# --------------------------------------------------------------------------

def _random_uniform_measure(rng, n):
    pts = rng.standard_normal((n, 3)) * rng.uniform(0.3, 3.0)
    return DiscreteMeasure.uniform(pts)


def transport_suite(instances=500, max_n=7, p_list=(2.0, 2.5, 4.0), eps_list=(0.0, 0.5, 1.0),
                    seed=3, tol=1e-12):
    """Assignment solver against permutation brute force on random uniform instances."""
    rng = np.random.default_rng(seed)
    excess, scale, dump = [], [], []
    for k in range(instances):
        n = int(rng.integers(1, max_n + 1))
        params = CostParams(p_list[k % len(p_list)], eps_list[(k // len(p_list)) % len(eps_list)])
        F, G = _random_uniform_measure(rng, n), _random_uniform_measure(rng, n)
        v_opt, _ = optimal_cost(F, G, params)
        v_bf = brute_force_cost(F, G, params)
        excess.append(abs(v_opt - v_bf))
        scale.append(max(1.0, abs(v_bf)))
        dump.append([n, params.p, params.eps])
    return [_record("transport", "assignment = brute force", np.array(excess), np.array(scale),
                    tol, np.array(dump))]


def cost_suite(samples=1_000_000, seed=4, tol=1e-12, rti_samples=100_000):
    """phi_eps derivative properties, the eps sandwich and the relaxed triangle constant."""
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.0, 100.0, samples)
    e = 1.0 - rng.random(samples)
    dump = np.column_stack([r, e])
    f, f1, f2 = phi_eps(r, e), dphi_eps(r, e), d2phi_eps(r, e)
    ones = np.ones(samples)
    recs = [_record("cost", "r phi' <= phi", r * f1 - f, np.abs(f) + 1e-300, tol, dump),
            _record("cost", "0 <= phi' <= 1", np.maximum(-f1, f1 - 1.0), ones, tol, dump),
            _record("cost", "phi'' <= 0", f2, ones, tol, dump)]
    n = min(samples, 200_000)
    v, w = _vectors(rng, n), _vectors(rng, n)
    eps = 1.0 - rng.random(n)
    for p in (2.0, 3.0, 4.0):
        c1 = cost(v, w, CostParams(p, 1.0))
        ce = weight_cost(v, w, p, eps)
        recs.append(_record("cost", f"c_(p,1) <= c_(p,eps) <= c_(p,1)/eps (p={p:g})",
                            np.maximum(c1 - ce, ce - c1 / eps), ce, tol,
                            np.column_stack([v, w, eps])))
        dist_p = norm(v - w) ** p
        ratio = dist_p / np.where(c1 > 0, c1, 1.0)
        recs.append({"suite": "cost", "check": f"|v-w|^p <= C c_(p,1) (p={p:g})", "samples": n,
                     "violations": 0, "max_violation": 0.0, "worst_sample": None,
                     "fitted_constant": float(np.max(ratio))})
    for p, e1 in ((2.0, 0.0), (3.0, 0.5), (4.0, 1.0)):
        C = rti_constant_estimate(CostParams(p, e1), rti_samples, rng)
        recs.append({"suite": "cost", "check": f"relaxed triangle (p={p:g}, eps={e1:g})",
                     "samples": rti_samples, "violations": int(not np.isfinite(C)),
                     "max_violation": 0.0, "worst_sample": None, "fitted_constant": C})
    return recs


def weight_cost(v, w, p, eps):
    """c_{p,eps} with a per-sample eps."""
    d = v - w
    r = np.sum(d * d, axis=-1)
    return (1.0 + norm(v) ** p + norm(w) ** p) * r / (1.0 + eps * r)


# --------------------------------------------------------------------------

def ode_suite(draws=100, t_grid=(0.01, 0.1, 1.0, 10.0), seed=5, tol=1e-6):
    """RK4 oracle for the comparison ODE never exceeds the explicit bound."""
    params = random_ode_params(seed, draws)
    u = comparison_ode_solution(params, t_grid)
    bound = np.array([[ode_comparison_bound(q, t) for t in sorted(t_grid)] for q in params])
    dump = np.array([[q.a, q.b, q.c, q.alpha, q.beta] for q in params])
    excess = (u - bound).max(axis=1)
    scale = bound.max(axis=1)
    rec = _record("ode", "RK4 solution <= comparison bound", excess, scale, tol, dump)
    rec["min_relative_slack"] = float(np.min((bound - u) / bound))
    return [rec]


SUITES = {
    "kernel": kernel_suite,
    "ito": ito_suite,
    "cent": cent_suite,
    "conservation": conservation_suite,
    "transport": transport_suite,
    "cost": cost_suite,
    "ode": ode_suite,
}


def run_suites(config):
    """Run the suites named in ``config["suites"]`` with per-suite keyword overrides."""
    records = []
    for name in config.get("suites", list(SUITES)):
        kwargs = dict(config.get(name, {}))
        records.extend(SUITES[name](**kwargs))
    return records
