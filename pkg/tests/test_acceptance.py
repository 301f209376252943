"""Acceptance criteria at full scale.

Each test prints one ``ACCEPTANCE k PASS/FAIL`` line and records it for the
terminal summary. Criteria 1-4 and 9 read the default ``verify`` run, whose
suites are timed individually; 5-8 drive the experiments directly.
"""

import math
import time

import numpy as np
import pytest

from landaulab.experiments import (conservation_statistics, decreasing_within_noise,
                                   lipschitz_scaling, moment_creation, relaxation)
from landaulab.moments import fit_step4_constant, step4_moment_bound

from conftest import ACCEPTANCE_LINES


def report(k, ok, detail):
    line = f"ACCEPTANCE {k} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def records(verify, suite):
    recs = [r for r in verify["report"]["records"] if r["suite"] == suite]
    assert recs, f"suite {suite} produced no records"
    return recs


def summary(recs):
    bad = [f"{r['check']} ({r['violations']} of {r['samples']})" for r in recs if r["violations"]]
    return ", ".join(bad) if bad else f"{len(recs)} checks, 0 violations"


def test_1_kernel_identities(default_verify):
    recs = records(default_verify, "kernel")
    elapsed = default_verify["timings"]["kernel"]
    ok = (all(r["violations"] == 0 for r in recs) and all(r["samples"] >= 10**6 for r in recs)
          and all(r["tolerance"] <= 1e-10 for r in recs) and elapsed < 30)
    report(1, ok, f"{summary(recs)}, {elapsed:.1f} s")


def test_2_ito_decomposition(default_verify):
    recs = records(default_verify, "ito")
    by = {r["check"]: r for r in recs}
    fd = by["analytic A = finite-difference A"]
    elapsed = default_verify["timings"]["ito"]
    ok = (all(r["violations"] == 0 for r in recs)
          and by["A c - sum k = remainder"]["tolerance"] <= 1e-8
          and by["A c - sum k = remainder"]["samples"] >= 10**5
          and by["remainder <= 0"]["samples"] >= 10**5
          and fd["tolerance"] <= 1e-4 and fd["samples"] >= 10**4 and elapsed < 120)
    report(2, ok, f"{summary(recs)}, {elapsed:.1f} s")


def test_3_central_inequality(default_verify):
    recs = records(default_verify, "cent")
    fitted = [r for r in recs if r["check"] in ("cent", "i1", "i2p", "i3")]
    grid = {(r["p"], r["gamma"], r["eps"]) for r in fitted if r["check"] == "cent"}
    elapsed = default_verify["timings"]["cent"]
    ok = (len(grid) == 18 and all(r["violations"] == 0 for r in recs)
          and all(r["samples"] >= 10**6 and r["fit_samples"] >= 10**5 for r in fitted)
          and {r["check"] for r in fitted} == {"cent", "i1", "i2p", "i3"} and elapsed < 600)
    C = max(r["fitted_constant"] for r in fitted if r["check"] == "cent")
    report(3, ok, f"{summary(recs)} over {len(grid)} (p, gamma, eps), max C_fit {C:.4g}, "
                  f"{elapsed:.1f} s")


def test_4_transport_exactness(default_verify):
    (rec,) = records(default_verify, "transport")
    elapsed = default_verify["timings"]["transport"]
    ok = rec["violations"] == 0 and rec["samples"] == 500 and rec["tolerance"] <= 1e-12 \
        and elapsed < 60
    report(4, ok, f"{rec['samples']} instances, {rec['violations']} mismatches, "
                  f"max gap {rec['max_violation']:.1e}, {elapsed:.1f} s")


def test_5_conservation_statistics():
    start = time.perf_counter()
    coarse = conservation_statistics(200, 500, 1e-3, 100, seed=1000, scheme="meanfield")
    fine = conservation_statistics(200, 500, 5e-4, 200, seed=1000, scheme="meanfield")
    elapsed = time.perf_counter() - start
    z = np.abs(coarse["momentum_mean"]) / coarse["momentum_se"]
    drift = abs(coarse["energy_mean"])
    ratio = coarse["energy_bias"] / fine["energy_bias"]
    ok = bool(np.all(z <= 3.0)) and drift <= 0.02 and ratio >= 1.7 and elapsed < 600
    report(5, ok, f"momentum |mean|/SE {np.round(z, 2).tolist()}, energy drift {drift:.2e}, "
                  f"bias ratio {ratio:.3f}, {elapsed:.1f} s")


def test_6_moment_creation():
    start = time.perf_counter()
    times = (0.1, 0.5, 1.0, 2.0)
    calib = moment_creation(10_000, times, dt=0.01, seed=0)
    C = fit_step4_constant(4, 1.0, 0.5, calib["moment"][1])
    failures = []
    for seed in range(1, 6):
        run = moment_creation(10_000, times, dt=0.01, seed=seed)
        m, se = run["moment"], run["se"]
        bound = step4_moment_bound(4, 1.0, np.array(times), C)
        if not np.all(np.isfinite(m)):
            failures.append(f"seed {seed} not finite")
        if not decreasing_within_noise(m, se):
            failures.append(f"seed {seed} not decreasing {np.round(m, 3).tolist()}")
        others = [i for i, t in enumerate(times) if t != 0.5]
        if np.any(m[others] > bound[others]):
            failures.append(f"seed {seed} above bound")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 300
    report(6, ok, f"C_fit {C:.4g}, m4 seed 0 {np.round(calib['moment'], 3).tolist()}, "
                  f"{'; '.join(failures) or '5 fresh seeds within bound'}, {elapsed:.1f} s")


def test_7_lipschitz_stability():
    start = time.perf_counter()
    res = lipschitz_scaling(2000, 0.1, (1.0, 0.5, 0.25), t_report=(0.5, 1.0), dt=0.005,
                            p=3.0, eps=1.0)
    elapsed = time.perf_counter() - start
    final = res["ratios"][-1]
    ok = bool(np.all((final >= 1.4) & (final <= 2.6))) and elapsed < 600
    report(7, ok, f"initial costs {np.round(res['initial_cost'], 4).tolist()}, "
                  f"ratios at t=1 {np.round(final, 3).tolist()}, {elapsed:.1f} s")


def test_8_relaxation():
    start = time.perf_counter()
    res = relaxation(10_000, (2.0, 1.0, 1.0), 5.0, dt=0.005, scheme="meanfield", conserve=True)
    elapsed = time.perf_counter() - start
    d = res["directional"][-1]
    spread = (d.max() - d.min()) / d.mean()
    m4_ratio = res["m4"][-1] / res["maxwellian_m4"]
    ok = spread <= 0.03 and abs(m4_ratio - 1) <= 0.05 and elapsed < 300
    report(8, ok, f"directional {np.round(d, 4).tolist()} spread {spread:.2%}, "
                  f"m4 / 15T^2 {m4_ratio:.4f}, {elapsed:.1f} s")


def test_9_ode_comparison(default_verify):
    (rec,) = records(default_verify, "ode")
    elapsed = default_verify["timings"]["ode"]
    ok = rec["violations"] == 0 and rec["samples"] == 100 and rec["min_relative_slack"] >= -1e-6 \
        and elapsed < 60
    report(9, ok, f"{rec['samples']} draws, min relative slack {rec['min_relative_slack']:.3g}, "
                  f"{elapsed:.1f} s")
