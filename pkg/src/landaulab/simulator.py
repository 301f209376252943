"""N-particle approximations of the Landau dynamics.

Two Euler-Maruyama schemes are provided for the particle system driven by
the mean-field coefficients b(v, f) = mean_j b(v - V_j) and
a(v, f) = mean_j a(v - V_j):

* ``meanfield``: one 3D Brownian increment per particle, diffusion through
  the PSD square root of a(V_i, f).
* ``pairwise-noise``: one increment xi_ij per ordered pair, entering as
  sqrt(dt/N) sum_j sigma(V_i - V_j) xi_ij. Its noise covariance matches
  the meanfield scheme and it is the scheme whose coupled version shares
  noise between two ensembles.

Coupled ensembles drive both components with the same xi_ij. Coefficients
may be truncated to b_k(x) = -2 (|x| ^ k)^g x and
sigma_k(x) = (|x| ^ k)^(g/2) |x| Pi_x, where ^ is the minimum.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from . import rng as rngmod
from .kernel import check_gamma, norm, psd_sqrt, sigma_matrix
from .moments import empirical_moment, gaussian_moment
from .transport import CostParams, cost, cost_matrix, optimal_assignment, assignment_value

SCHEMES = ("meanfield", "pairwise-noise")
AUTO_TRUNCATION_FACTOR = 100.0
NO_TRUNCATION = math.inf


class NumericalAbort(RuntimeError):
    """A step produced non-finite velocities; ``last_state`` is the last valid ensemble."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


@dataclass(frozen=True)
class SchemeConfig:
    dt: float
    steps: int = 1
    scheme: str = "pairwise-noise"
    truncation_k: float = None
    conserve: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.truncation_k is not None and not self.truncation_k > 0:
            raise ValueError("truncation_k must be positive")


@dataclass
class ParticleEnsemble:
    velocities: np.ndarray
    gamma: float
    seed: int = 0
    time: float = 0.0
    step_index: int = 0
    initial_max_speed: float = None
    last_truncation: float = None

    def __post_init__(self):
        self.velocities = np.array(self.velocities, dtype=float, copy=True).reshape(-1, 3)
        self.gamma = check_gamma(self.gamma)
        if len(self.velocities) < 2:
            raise ValueError("an ensemble needs N >= 2")
        if not np.all(np.isfinite(self.velocities)):
            raise ValueError("velocities must be finite")
        if self.initial_max_speed is None:
            self.initial_max_speed = float(np.max(norm(self.velocities)))

    @property
    def n(self):
        return len(self.velocities)


@dataclass
class CoupledEnsemble:
    """Index-aligned pairs (V_i, Vt_i) approximating a coupling of two laws."""
    first: np.ndarray
    second: np.ndarray
    gamma: float
    seed: int = 0
    time: float = 0.0
    step_index: int = 0
    initial_max_speed: float = None
    last_truncation: float = None

    def __post_init__(self):
        self.first = np.array(self.first, dtype=float, copy=True).reshape(-1, 3)
        self.second = np.array(self.second, dtype=float, copy=True).reshape(-1, 3)
        self.gamma = check_gamma(self.gamma)
        if self.first.shape != self.second.shape:
            raise ValueError("both components need the same number of particles")
        if len(self.first) < 2:
            raise ValueError("an ensemble needs N >= 2")
        if not (np.all(np.isfinite(self.first)) and np.all(np.isfinite(self.second))):
            raise ValueError("velocities must be finite")
        if self.initial_max_speed is None:
            self.initial_max_speed = float(max(np.max(norm(self.first)),
                                               np.max(norm(self.second))))

    @property
    def n(self):
        return len(self.first)

    def marginal(self, which=0):
        V = self.first if which == 0 else self.second
        return ParticleEnsemble(V, self.gamma, self.seed, self.time, self.step_index,
                                self.initial_max_speed)


# --------------------------------------------------------------------------
# compiled pair sums
# --------------------------------------------------------------------------

# Reassociation lets the inner reductions vectorize; the no-nan/no-inf flags
# stay off because exp(g log 0) = 0 is relied on at coincident pairs.
_FASTMATH = {"nsz", "arcp", "contract", "reassoc"}


@numba.njit(cache=True, fastmath=_FASTMATH, inline="always")
def _power(m, gamma):
    if gamma == 1.0:
        return m
    if gamma == 0.5:
        return math.sqrt(m)
    return math.exp(gamma * math.log(m))


def _meanfield_soa(X, Y, Z, gamma, k):
    n = X.shape[0]
    drift = np.zeros((n, 3))
    amat = np.zeros((n, 6))
    for i in numba.prange(n):
        vx, vy, vz = X[i], Y[i], Z[i]
        bx = by = bz = 0.0
        axx = ayy = azz = axy = axz = ayz = 0.0
        for j in range(n):
            x0 = vx - X[j]
            x1 = vy - Y[j]
            x2 = vz - Z[j]
            r2 = x0 * x0 + x1 * x1 + x2 * x2
            s = _power(min(math.sqrt(r2), k), gamma)
            bx -= s * x0
            by -= s * x1
            bz -= s * x2
            axx += s * (r2 - x0 * x0)
            ayy += s * (r2 - x1 * x1)
            azz += s * (r2 - x2 * x2)
            axy -= s * x0 * x1
            axz -= s * x0 * x2
            ayz -= s * x1 * x2
        drift[i, 0] = 2.0 * bx / n
        drift[i, 1] = 2.0 * by / n
        drift[i, 2] = 2.0 * bz / n
        amat[i, 0] = axx / n
        amat[i, 1] = ayy / n
        amat[i, 2] = azz / n
        amat[i, 3] = axy / n
        amat[i, 4] = axz / n
        amat[i, 5] = ayz / n
    return drift, amat


def _pairwise_soa(X, Y, Z, xi, gamma, k):
    n = X.shape[0]
    drift = np.zeros((n, 3))
    noise = np.zeros((n, 3))
    half = 0.5 * gamma
    for i in numba.prange(n):
        vx, vy, vz = X[i], Y[i], Z[i]
        bx = by = bz = 0.0
        nx = ny = nz = 0.0
        for j in range(n):
            x0 = vx - X[j]
            x1 = vy - Y[j]
            x2 = vz - Z[j]
            r2 = x0 * x0 + x1 * x1 + x2 * x2
            if r2 == 0.0:
                continue
            r = math.sqrt(r2)
            m = min(r, k)
            s = _power(m, gamma)
            bx -= s * x0
            by -= s * x1
            bz -= s * x2
            # sigma_k(x) xi = (|x|^k)^(g/2) (|x|^2 xi - (x.xi) x) / |x|
            e0, e1, e2 = xi[i, j, 0], xi[i, j, 1], xi[i, j, 2]
            t = _power(m, half) / r
            dot = x0 * e0 + x1 * e1 + x2 * e2
            nx += t * (r2 * e0 - dot * x0)
            ny += t * (r2 * e1 - dot * x1)
            nz += t * (r2 * e2 - dot * x2)
        drift[i, 0] = 2.0 * bx / n
        drift[i, 1] = 2.0 * by / n
        drift[i, 2] = 2.0 * bz / n
        noise[i, 0] = nx
        noise[i, 1] = ny
        noise[i, 2] = nz
    return drift, noise


# Rows are independent, so both variants give bitwise-equal results. The
# parallel one only pays off with several threads: on one it blocks the
# inner-loop vectorization.
_serial = numba.njit(cache=True, fastmath=_FASTMATH)
_parallel = numba.njit(cache=True, fastmath=_FASTMATH, parallel=True)
_KERNELS = {
    False: (_serial(_meanfield_soa), _serial(_pairwise_soa)),
    True: (_parallel(_meanfield_soa), _parallel(_pairwise_soa)),
}


def _kernels():
    # the first call starts numba's threading layer, which complains about an
    # outdated TBB before falling back to another layer
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*TBB", category=numba.NumbaWarning)
        return _KERNELS[numba.get_num_threads() > 1]


def _soa(V):
    V = np.asarray(V, dtype=float)
    return tuple(np.ascontiguousarray(V[:, c]) for c in range(3))


def _meanfield_sums(V, gamma, k):
    """Mean drift (N, 3) and mean diffusion entries (N, 6) ordered xx, yy, zz, xy, xz, yz."""
    return _kernels()[0](*_soa(V), float(gamma), float(k))


def _pairwise_sums(V, xi, gamma, k):
    """Mean drift (N, 3) and noise sums sum_{j != i} sigma_k(V_i - V_j) xi_ij (N, 3)."""
    return _kernels()[1](*_soa(V), np.ascontiguousarray(xi), float(gamma), float(k))


def _k(k):
    return NO_TRUNCATION if k is None else float(k)


def _unpack_sym(amat):
    A = np.empty(amat.shape[:-1] + (3, 3))
    A[..., 0, 0], A[..., 1, 1], A[..., 2, 2] = amat[..., 0], amat[..., 1], amat[..., 2]
    A[..., 0, 1] = A[..., 1, 0] = amat[..., 3]
    A[..., 0, 2] = A[..., 2, 0] = amat[..., 4]
    A[..., 1, 2] = A[..., 2, 1] = amat[..., 5]
    return A


# --------------------------------------------------------------------------
# coefficients
# --------------------------------------------------------------------------

def truncate_coefficients(x, k, gamma):
    """Truncated drift b_k(x) and diffusion sigma_k(x)."""
    gamma = check_gamma(gamma)
    if not k > 0:
        raise ValueError("truncation level k must be positive")
    x = np.asarray(x, dtype=float)
    r = norm(x)
    s = np.minimum(r, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        sg = np.where(s > 0, s ** gamma, 0.0)
        u = np.where(r[..., None] > 0, x / np.where(r > 0, r, 1.0)[..., None], 0.0)
    b = -2.0 * sg[..., None] * x
    proj = np.eye(3) - u[..., :, None] * u[..., None, :]
    sig = (np.sqrt(sg) * r)[..., None, None] * proj
    return b, np.where((r > 0)[..., None, None], sig, 0.0)


def meanfield_coefficients(i, E, truncation_k=None):
    """Drift mean_j b(V_i - V_j) and diffusion psd_sqrt(mean_j a(V_i - V_j)) of particle i.

    ``i`` may be an index, a sequence of indices or ``None`` for all particles.
    """
    drift, amat = _meanfield_sums(E.velocities, E.gamma, _k(truncation_k))
    A = _unpack_sym(amat)
    if i is not None:
        drift, A = drift[i], A[i]
    return drift, psd_sqrt(A)


def meanfield_diffusion_matrix(E, truncation_k=None):
    """mean_j a(V_i - V_j) for every particle, shape (N, 3, 3)."""
    _, amat = _meanfield_sums(E.velocities, E.gamma, _k(truncation_k))
    return _unpack_sym(amat)


# --------------------------------------------------------------------------
# steps
# --------------------------------------------------------------------------

def _conserve(V_new, V_old):
    """Shift and scale V_new so that its mean and m_2 equal those of V_old."""
    m_old, m_new = V_old.mean(axis=0), V_new.mean(axis=0)
    e_old = np.mean(np.sum((V_old - m_old) ** 2, axis=1))
    e_new = np.mean(np.sum((V_new - m_new) ** 2, axis=1))
    if e_new == 0.0:
        return V_new - m_new + m_old
    return m_old + (V_new - m_new) * math.sqrt(e_old / e_new)


def _increment_meanfield(V, gamma, seed, step, dt, k):
    drift, amat = _meanfield_sums(V, gamma, k)
    if not np.all(np.isfinite(amat)):
        # overflowed coefficients; the caller retries truncated or aborts
        return np.full(V.shape, np.nan)
    root = psd_sqrt(_unpack_sym(amat))
    xi = rngmod.block_normals(seed, step, V.shape)
    return dt * drift + math.sqrt(dt) * np.einsum("nkl,nl->nk", root, xi)


def pairwise_noise(seed, step, n, out=None):
    """The array xi[i, j] of partner noises for one step."""
    return rngmod.row_normals(seed, step, n, (n, 3), rngmod.TAG_PAIRWISE, out=out)


def _increment_pairwise(V, gamma, xi, dt, k):
    n = V.shape[0]
    drift, noise = _pairwise_sums(V, xi, gamma, k)
    return dt * drift + math.sqrt(dt / n) * noise


def _advance(states, increment_fn, cfg, k_state):
    """Apply increments with automatic truncation on non-finite results.

    ``states`` is a list of (N, 3) arrays, ``increment_fn(k)`` returns their
    increments. ``k_state`` is (configured k, auto k candidate).
    """
    k_cfg, k_auto = k_state
    k = _k(k_cfg)
    incs = increment_fn(k)
    new = [V + dV for V, dV in zip(states, incs)]
    used = k_cfg
    if not all(np.all(np.isfinite(V)) for V in new) and k_cfg is None:
        used = k_auto
        incs = increment_fn(k_auto)
        new = [V + dV for V, dV in zip(states, incs)]
    if not all(np.all(np.isfinite(V)) for V in new):
        raise NumericalAbort(
            "non-finite velocities after a step; set truncation_k or reduce dt "
            f"(dt <= 0.1 * max|V_i - V_j|^(-gamma) is a safe guide)")
    if cfg.conserve:
        new = [_conserve(Vn, Vo) for Vn, Vo in zip(new, states)]
    return new, used


def _auto_k(max_speed):
    return AUTO_TRUNCATION_FACTOR * max(max_speed, 1e-300)


def step_meanfield(E, cfg):
    """One Euler-Maruyama step of the meanfield scheme; returns a new ensemble."""
    V = E.velocities
    inc = lambda k: [_increment_meanfield(V, E.gamma, E.seed, E.step_index, cfg.dt, k)]
    try:
        (Vn,), used = _advance([V], inc, cfg, (cfg.truncation_k, _auto_k(E.initial_max_speed)))
    except NumericalAbort as err:
        err.last_state = E
        raise
    out = replace(E, velocities=Vn, time=E.time + cfg.dt, step_index=E.step_index + 1,
                  last_truncation=used)
    return out


def step_pairwise_noise(E, cfg, xi=None):
    """One step of the pairwise-noise scheme; ``xi`` overrides the keyed noise."""
    V = E.velocities
    if xi is None:
        xi = pairwise_noise(E.seed, E.step_index, E.n)
    inc = lambda k: [_increment_pairwise(V, E.gamma, xi, cfg.dt, k)]
    try:
        (Vn,), used = _advance([V], inc, cfg, (cfg.truncation_k, _auto_k(E.initial_max_speed)))
    except NumericalAbort as err:
        err.last_state = E
        raise
    out = replace(E, velocities=Vn, time=E.time + cfg.dt, step_index=E.step_index + 1,
                  last_truncation=used)
    return out


def step_coupled(CE, cfg, xi=None):
    """One step of the coupled pair system; both components see the same xi_ij."""
    if xi is None:
        xi = pairwise_noise(CE.seed, CE.step_index, CE.n)
    states = [CE.first, CE.second]
    inc = lambda k: [_increment_pairwise(V, CE.gamma, xi, cfg.dt, k) for V in states]
    try:
        (V1, V2), used = _advance(states, inc, cfg,
                                  (cfg.truncation_k, _auto_k(CE.initial_max_speed)))
    except NumericalAbort as err:
        err.last_state = CE
        raise
    out = replace(CE, first=V1, second=V2, time=CE.time + cfg.dt, step_index=CE.step_index + 1,
                  last_truncation=used)
    return out


def step_shared_noise(stack, gamma, seed, step_index, cfg, xi=None):
    """Advance K ensembles of equal size (array (K, N, 3)) with one shared xi.

    Each slice evolves exactly as it would inside :func:`step_coupled` with
    the same seed, so one base ensemble can be coupled to several
    perturbations at the cost of one noise draw.
    """
    stack = np.asarray(stack, dtype=float)
    n = stack.shape[1]
    if xi is None:
        xi = pairwise_noise(seed, step_index, n)
    states = list(stack)
    inc = lambda k: [_increment_pairwise(V, gamma, xi, cfg.dt, k) for V in states]
    auto = _auto_k(float(np.max(norm(stack))))
    new, _ = _advance(states, inc, cfg, (cfg.truncation_k, auto))
    return np.stack(new)


def step(E, cfg):
    """Dispatch on ``cfg.scheme`` for a ParticleEnsemble, or step a CoupledEnsemble."""
    if isinstance(E, CoupledEnsemble):
        return step_coupled(E, cfg)
    if cfg.scheme == "meanfield":
        return step_meanfield(E, cfg)
    return step_pairwise_noise(E, cfg)


# --------------------------------------------------------------------------
# diagnostics and runs
# --------------------------------------------------------------------------

@dataclass
class DiagnosticsConfig:
    orders: tuple = (2.0, 4.0)
    gaussian_a: float = 0.1
    cost: CostParams = field(default_factory=lambda: CostParams(3.0, 1.0))
    assignment_cap: int = 1000


def diagnostics(E, config=DiagnosticsConfig()):
    """Momentum, moments and a Gaussian moment; coupling costs for coupled ensembles.

    Moments of a CoupledEnsemble are those of its first component, with the
    second component's under keys suffixed ``_2``.
    """
    if isinstance(E, CoupledEnsemble):
        rec = _single(E.first, E.time, config)
        second = _single(E.second, E.time, config)
        rec.update({f"{k}_2": v for k, v in second.items() if k != "t"})
        rec["aligned_cost"] = float(np.mean(cost(E.first, E.second, config.cost)))
        if E.n <= config.assignment_cap:
            C = cost_matrix(E.first, E.second, config.cost)
            rec["optimal_cost"] = assignment_value(C, optimal_assignment(C))
        else:
            rec["optimal_cost"] = float("nan")
        return rec
    return _single(E.velocities, E.time, config)


def _single(V, t, config):
    mom = V.mean(axis=0)
    rec = {"t": float(t), "px": float(mom[0]), "py": float(mom[1]), "pz": float(mom[2])}
    for p in config.orders:
        rec[f"m{p:g}"] = empirical_moment(V, p)
    g = gaussian_moment(V, config.gaussian_a)
    rec["gauss"] = g.value
    rec["gauss_clipped"] = int(g.clipped)
    return rec


def run(E, cfg, record_every=1, observer=None):
    """Advance ``cfg.steps`` steps, calling ``observer(state)`` at recorded steps.

    The initial state and the final state are always observed. Returns the
    final state and the list of observer results.
    """
    observer = observer or diagnostics
    out = [observer(E)]
    for s in range(cfg.steps):
        E = step(E, cfg)
        if (s + 1) % record_every == 0 or s + 1 == cfg.steps:
            out.append(observer(E))
    return E, out


def energy_bias_compensator(E, dt, truncation_k=None):
    """Expected one-step change of m_2 under the meanfield scheme, dt^2 mean_i |b_i|^2.

    The order-dt part of the expected change cancels by antisymmetry of b,
    so this is the whole conditional drift of the discrete energy.
    """
    drift, _ = _meanfield_sums(E.velocities, E.gamma, _k(truncation_k))
    return dt * dt * float(np.mean(np.sum(drift * drift, axis=1)))


def sigma_pair_matrices(V, gamma):
    """sigma(V_i - V_j) for all pairs, shape (N, N, 3, 3); small N only."""
    V = np.asarray(V, dtype=float)
    return sigma_matrix(V[:, None, :] - V[None, :, :], gamma)
