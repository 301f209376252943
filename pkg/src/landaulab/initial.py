"""Initial velocity ensembles.

Each sampler takes a numpy Generator (or seed) and a particle count and
returns an (N, 3) array. :func:`make_initial` builds one from a config dict.
"""

import numpy as np

from .kernel import norm


def _rng(rng):
    return np.random.default_rng(rng)


def _unit_vectors(rng, n):
    u = rng.standard_normal((n, 3))
    return u / norm(u)[:, None]


def gaussian(rng, n, temperatures=(1.0, 1.0, 1.0), mean=(0.0, 0.0, 0.0)):
    """Normal velocities with per-axis variances ``temperatures``."""
    temps = np.broadcast_to(np.asarray(temperatures, dtype=float), (3,))
    if np.any(temps < 0):
        raise ValueError("temperatures must be nonnegative")
    return np.asarray(mean, dtype=float) + _rng(rng).standard_normal((n, 3)) * np.sqrt(temps)


def uniform_ball(rng, n, radius=1.0):
    rng = _rng(rng)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return _unit_vectors(rng, n) * r[:, None]


def two_point(rng, n, a=(1.0, 0.0, 0.0), b=(-1.0, 0.0, 0.0), weight=0.5, spread=0.0):
    """Mixture of two (optionally blurred) point masses; ``weight`` goes to ``a``."""
    rng = _rng(rng)
    pick_a = rng.random(n) < weight
    pts = np.where(pick_a[:, None], np.asarray(a, float), np.asarray(b, float))
    if spread > 0:
        pts = pts + spread * rng.standard_normal((n, 3))
    return pts


def line(rng, n, direction=(1.0, 0.0, 0.0), scale=1.0):
    """Velocities on a line through the origin: a degenerate initial law."""
    e = np.asarray(direction, dtype=float)
    e = e / np.linalg.norm(e)
    return scale * _rng(rng).standard_normal(n)[:, None] * e


def heavy_tail(rng, n, index=6.0, energy=1.0):
    """Isotropic law with Lomax (Pareto II) speeds of tail ``index``.

    P(|v| > r) = (1 + r/s)^(-index), so m_q is finite exactly for q < index.
    The scale s is chosen so that m_2 = ``energy``; this needs index > 2.
    """
    if index <= 2:
        raise ValueError("heavy_tail needs index > 2 for a finite second moment")
    rng = _rng(rng)
    s = np.sqrt(energy * (index - 1.0) * (index - 2.0) / 2.0)
    r = s * rng.pareto(index, size=n)
    return _unit_vectors(rng, n) * r[:, None]


def recenter(V, energy=None):
    """Shift to zero mean; with ``energy`` also rescale so that m_2 equals it."""
    V = np.asarray(V, dtype=float) - np.mean(V, axis=0)
    if energy is not None:
        m2 = np.mean(np.sum(V * V, axis=1))
        if m2 == 0:
            raise ValueError("cannot rescale a coincident ensemble")
        V = V * np.sqrt(energy / m2)
    return V


SAMPLERS = {
    "gaussian": gaussian,
    "uniform_ball": uniform_ball,
    "two_point": two_point,
    "line": line,
    "heavy_tail": heavy_tail,
}


def make_initial(desc, n, rng):
    """Build an ensemble from ``{"kind": name, **params}``.

    Optional keys ``recenter`` (bool) and ``energy_target`` (float) post-process the
    sample with :func:`recenter`.
    """
    desc = dict(desc)
    kind = desc.pop("kind")
    if kind not in SAMPLERS:
        raise ValueError(f"unknown initial condition {kind!r}; choose from {sorted(SAMPLERS)}")
    center = desc.pop("recenter", False)
    energy = desc.pop("energy_target", None)
    V = SAMPLERS[kind](rng, n, **desc)
    if center or energy is not None:
        V = recenter(V, energy)
    return V
