"""Desk-scale experiments built on the simulator.

Each driver returns plain dicts and arrays so the CLI can serialize them
and the tests can assert on them.
"""

import math
from dataclasses import dataclass

import numpy as np

from .initial import gaussian, heavy_tail, recenter
from .moments import empirical_moment
from .simulator import (CoupledEnsemble, NumericalAbort, ParticleEnsemble, SchemeConfig,
                        energy_bias_compensator, step, step_shared_noise)
from .transport import CostParams, assignment_value, cost, cost_matrix, optimal_assignment


def _energy(V):
    return float(np.mean(np.sum(V * V, axis=1)))


# --------------------------------------------------------------------------
# conservation statistics
# --------------------------------------------------------------------------

def conservation_run(seed, n, dt, steps, gamma=1.0, scheme="meanfield", temperature=1.0):
    """One run from an isotropic Gaussian; returns momentum change and energy changes.

    ``compensator`` sums the expected one-step energy change dt^2 mean|b_i|^2
    along the path, relative to the initial energy.
    """
    V0 = gaussian(np.random.default_rng(seed), n, (temperature,) * 3)
    E = ParticleEnsemble(V0, gamma, seed=seed)
    cfg = SchemeConfig(dt=dt, scheme=scheme)
    e0 = _energy(E.velocities)
    comp = 0.0
    for _ in range(steps):
        comp += energy_bias_compensator(E, dt)
        E = step(E, cfg)
    return {"dP": E.velocities.mean(axis=0) - V0.mean(axis=0),
            "dE_rel": (_energy(E.velocities) - e0) / e0,
            "compensator_rel": comp / e0}


def conservation_statistics(runs, n, dt, steps, gamma=1.0, seed=0, scheme="meanfield"):
    """Aggregate :func:`conservation_run` over independent seeds seed, seed+1, ..."""
    out = [conservation_run(seed + r, n, dt, steps, gamma, scheme) for r in range(runs)]
    dP = np.array([o["dP"] for o in out])
    dE = np.array([o["dE_rel"] for o in out])
    comp = np.array([o["compensator_rel"] for o in out])
    se = lambda a: np.std(a, axis=0, ddof=1) / math.sqrt(runs)
    return {"runs": runs, "dt": dt, "steps": steps,
            "momentum_mean": dP.mean(axis=0), "momentum_se": se(dP),
            "energy_mean": float(dE.mean()), "energy_se": float(se(dE)),
            "energy_bias": float(comp.mean()), "energy_bias_se": float(se(comp))}


# --------------------------------------------------------------------------
# relaxation
# --------------------------------------------------------------------------

def relaxation(n, temperatures=(2.0, 1.0, 1.0), t_final=5.0, dt=0.005, seed=0, gamma=1.0,
               scheme="meanfield", conserve=True, record_every=None):
    """Anisotropic Gaussian start; directional second moments over time."""
    V0 = gaussian(np.random.default_rng(seed), n, temperatures)
    E = ParticleEnsemble(V0, gamma, seed=seed)
    steps = int(round(t_final / dt))
    cfg = SchemeConfig(dt=dt, scheme=scheme, conserve=conserve)
    record_every = record_every or max(1, steps // 10)
    times, directional, m4 = [0.0], [np.mean(V0 ** 2, axis=0)], [empirical_moment(V0, 4)]
    for s in range(steps):
        E = step(E, cfg)
        if (s + 1) % record_every == 0 or s + 1 == steps:
            times.append(E.time)
            directional.append(np.mean(E.velocities ** 2, axis=0))
            m4.append(empirical_moment(E.velocities, 4))
    directional = np.array(directional)
    T = directional[-1].sum() / 3.0
    return {"times": np.array(times), "directional": directional, "m4": np.array(m4),
            "temperature": T, "maxwellian_m4": 15.0 * T * T, "final": E}


# --------------------------------------------------------------------------
# moment creation
# --------------------------------------------------------------------------

def moment_creation(n, times=(0.1, 0.5, 1.0, 2.0), dt=0.01, seed=0, gamma=1.0, tail_index=6.0,
                    order=4.0, conserve=True, scheme="meanfield"):
    """Heavy-tail start normalized to m_2 = 1; m_order and its standard error at ``times``."""
    V0 = recenter(heavy_tail(np.random.default_rng(seed), n, tail_index), energy=1.0)
    E = ParticleEnsemble(V0, gamma, seed=seed)
    cfg = SchemeConfig(dt=dt, scheme=scheme, conserve=conserve)
    targets = {int(round(t / dt)): t for t in times}
    out = {"times": [], "moment": [], "se": [], "initial": empirical_moment(V0, order)}
    for s in range(max(targets)):
        E = step(E, cfg)
        if s + 1 in targets:
            r = np.sum(E.velocities ** 2, axis=1) ** (order / 2.0)
            out["times"].append(targets[s + 1])
            out["moment"].append(float(np.mean(r)))
            out["se"].append(float(np.std(r, ddof=1) / math.sqrt(n)))
    return {k: (np.array(v) if isinstance(v, list) else v) for k, v in out.items()}


def decreasing_within_noise(values, se, k=3.0):
    """True when each value exceeds its successor by no less than -k combined SEs."""
    values, se = np.asarray(values), np.asarray(se)
    tol = k * np.sqrt(se[:-1] ** 2 + se[1:] ** 2)
    return bool(np.all(values[1:] <= values[:-1] + tol))


# --------------------------------------------------------------------------
# Lipschitz scaling of the coupling cost
# --------------------------------------------------------------------------

@dataclass
class PerturbationFamily:
    """Displacements V + h * eta of a base ensemble, reordered by the optimal assignment.

    After reordering, the index-aligned cost equals the exact transport cost,
    so the coupled run starts from an optimal coupling.
    """
    base: np.ndarray
    direction: np.ndarray
    params: CostParams

    def at_amplitude(self, h):
        W = self.base + h * self.direction
        C = cost_matrix(self.base, W, self.params)
        perm = optimal_assignment(C)
        return W[perm], assignment_value(C, perm)

    def amplitude_for_cost(self, target, lo=1e-6, hi=10.0, iters=50):
        """Bisection (in log h) for the amplitude whose transport cost equals ``target``."""
        if target <= 0:
            return 0.0
        for _ in range(iters):
            mid = math.sqrt(lo * hi)
            if self.at_amplitude(mid)[1] < target:
                lo = mid
            else:
                hi = mid
        return hi


def lipschitz_scaling(n, cost_level=0.1, scales=(1.0, 0.5, 0.25), t_report=(0.5, 1.0), dt=0.005,
                      seed=0, gamma=1.0, p=3.0, eps=1.0, temperature=1.0, record_every=None,
                      assignment_cap=0):
    """Couple a base ensemble with perturbations at transport costs cost_level * scales.

    The cost is quadratic in the displacement, so the amplitude is scaled by
    sqrt(scale). All copies share the pairwise noise and the base ensemble,
    which equals running one coupled system per scale with the same seed.
    Returns the index-aligned costs at ``t_report`` for every scale, and with
    ``record_every`` a time series of costs and moment functionals.
    ``optimal_cost`` is computed when n <= ``assignment_cap``.
    """
    params = CostParams(p, eps)
    rng = np.random.default_rng(seed)
    base = gaussian(rng, n, (temperature,) * 3)
    fam = PerturbationFamily(base, rng.standard_normal((n, 3)), params)
    h = fam.amplitude_for_cost(cost_level) if cost_level > 0 else 0.0
    copies, initial = [], []
    for s in scales:
        W, c = fam.at_amplitude(h * math.sqrt(s))
        copies.append(W)
        initial.append(c)
    stack = np.stack([base] + copies)
    cfg = SchemeConfig(dt=dt)
    targets = {int(round(t / dt)): t for t in t_report}
    total = max(targets)
    moments = lambda S: np.array([[empirical_moment(V, p), empirical_moment(V, p + gamma)]
                                  for V in S])
    track = [moments(stack)]
    series = []
    aligned = lambda: [float(np.mean(cost(stack[0], W, params))) for W in stack[1:]]

    def record(k):
        if n <= assignment_cap:
            opt = [assignment_value(C, optimal_assignment(C))
                   for C in (cost_matrix(stack[0], W, params) for W in stack[1:])]
        else:
            opt = [math.nan] * len(scales)
        expo = stability_exponent(np.array(track), dt, [k])[0]
        series.append({"t": k * dt, "aligned": aligned(), "optimal": opt,
                       "moments": track[-1], "exponent": expo})

    if record_every:
        record(0)
    rows = []
    for s in range(total):
        try:
            stack = step_shared_noise(stack, gamma, seed, s, cfg)
        except NumericalAbort as err:
            err.last_state = stack
            raise
        track.append(moments(stack))
        k = s + 1
        if record_every and (k % record_every == 0 or k == total):
            record(k)
        if k in targets:
            rows.append(aligned())
    costs = np.array(rows)
    exponent = stability_exponent(np.array(track), dt, sorted(targets))
    with np.errstate(divide="ignore", invalid="ignore"):
        growth = np.log(costs / np.array(initial)[None, :])
        ratios = costs[:, :-1] / costs[:, 1:]
    return {"scales": np.array(scales), "initial_cost": np.array(initial),
            "times": np.array(sorted(targets.values())), "costs": costs,
            "ratios": ratios, "amplitude": h,
            "exponent": exponent, "fitted_constant": np.max(growth / exponent, axis=0),
            "series": series, "final": stack}


def stability_exponent(track, dt, steps):
    """[1 + sup_s m_p] [1 + int_0^t (1 + m_{p+g}) ds] for each perturbed copy.

    ``track[s, k]`` holds (m_p, m_{p+g}) of copy k after s steps, copy 0 being
    the base ensemble; both marginals of a pair enter through their maximum.
    Returns an array (len(steps), K - 1).
    """
    mp = np.maximum(track[:, :1, 0], track[:, 1:, 0])
    mpg = np.maximum(track[:, :1, 1], track[:, 1:, 1])
    out = []
    for k in steps:
        sup = mp[:k + 1].max(axis=0)
        integral = np.trapezoid(1.0 + mpg[:k + 1], dx=dt, axis=0)
        out.append((1.0 + sup) * (1.0 + integral))
    return np.array(out)


def coupled_from_perturbation(n, cost_level, seed=0, gamma=1.0, p=3.0, eps=1.0):
    """A CoupledEnsemble whose aligned cost equals the transport cost ``cost_level``."""
    rng = np.random.default_rng(seed)
    base = gaussian(rng, n)
    fam = PerturbationFamily(base, rng.standard_normal((n, 3)), CostParams(p, eps))
    W, _ = fam.at_amplitude(fam.amplitude_for_cost(cost_level))
    return CoupledEnsemble(base, W, gamma, seed=seed)
