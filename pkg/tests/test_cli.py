import csv
import io
import json

import numpy as np
import pytest

from landaulab.cli import (DEFAULTS, EXIT_ABORT, EXIT_INPUT, EXIT_OK, EXIT_SOLVER_CAP,
                           EXIT_VIOLATION, main, validate_manifest)
from landaulab.io import read_points, write_points

N3_F = [(0, 0, 0), (1, 0, 0), (0, 2, 0)]
N3_G = [(1, 1, 0), (0, 0, 1), (3, 0, 0)]
TWO = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    rc = main([str(a) for a in argv], out=out, err=err)
    return rc, out.getvalue(), err.getvalue()


def write_config(path, **sections):
    path.write_text(json.dumps({"schema_version": 1, **sections}))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- verify ------------------------------------------------------------------------

def test_default_verify_passes(default_verify):
    assert default_verify["rc"] == EXIT_OK, default_verify["stderr"]
    report = default_verify["report"]
    assert report["passed"] is True
    assert set(report["suites"]) == set(DEFAULTS["verify"]["suites"])
    assert set(default_verify["timings"]) == set(report["suites"])
    assert all(r["violations"] == 0 for r in report["records"])


def test_verify_rejects_p_below_two(tmp_path):
    cfg = write_config(tmp_path / "c.json", verify={"cent": {"p_list": [1.5]}})
    rc, _, err = call("verify", "--config", cfg, "--out-dir", tmp_path)
    assert rc == EXIT_INPUT
    assert "p_list" in err


def test_verify_zero_tolerance_fails_with_sample_dump(tmp_path):
    cfg = write_config(tmp_path / "c.json", verify={"kernel": {"samples": 10_000}})
    rc, out, err = call("verify", "--suites", "kernel", "--tolerance", 0, "--config", cfg,
                        "--out-dir", tmp_path)
    assert rc == EXIT_VIOLATION
    assert "VIOLATION kernel/" in err and "worst sample [" in err
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert report["passed"] is False
    bad = [r for r in report["records"] if r["violations"]]
    assert bad and all(r["worst_sample"] for r in bad)


# -- transport ---------------------------------------------------------------------

def test_transport_identical_files(tmp_path):
    write_points(tmp_path / "a.csv", np.array(N3_F, float))
    rc, out, _ = call("transport", tmp_path / "a.csv", tmp_path / "a.csv")
    assert rc == EXIT_OK and out.strip() == "0"


def test_transport_n3_fixture_with_coupling(tmp_path):
    write_points(tmp_path / "a.csv", np.array(N3_F, float))
    write_points(tmp_path / "b.csv", np.array(N3_G, float))
    rc, out, _ = call("transport", tmp_path / "a.csv", tmp_path / "b.csv", "--p", 2.5, "--eps", 1,
                      "--coupling", "plan.csv", "--out-dir", tmp_path)
    assert rc == EXIT_OK
    assert out.strip() == "7.03142604472"
    plan = read_rows(tmp_path / "plan.csv")
    assert len(plan) == 3
    assert sorted(int(r["i"]) for r in plan) == [0, 1, 2]
    assert sorted(int(r["j"]) for r in plan) == [0, 1, 2]
    assert all(float(r["mass"]) == pytest.approx(1 / 3) for r in plan)


def test_transport_malformed_row(tmp_path):
    (tmp_path / "a.csv").write_text("x,y,z\n0,0,0\n1,0\n")
    write_points(tmp_path / "b.csv", np.zeros((2, 3)))
    rc, _, err = call("transport", tmp_path / "a.csv", tmp_path / "b.csv")
    assert rc == EXIT_INPUT
    assert "a.csv:3:" in err


def test_transport_needs_two_files(tmp_path):
    assert call("transport")[0] == EXIT_INPUT
    assert call("transport", tmp_path / "missing.csv", tmp_path / "missing.csv")[0] == EXIT_INPUT


def test_transport_solver_cap(tmp_path):
    pts = np.random.default_rng(0).standard_normal((6, 3))
    write_points(tmp_path / "a.csv", pts)
    cfg = write_config(tmp_path / "c.json", transport={"assignment_cap": 5})
    rc, _, err = call("transport", tmp_path / "a.csv", tmp_path / "a.csv", "--config", cfg)
    assert rc == EXIT_SOLVER_CAP
    assert "cap" in err


def test_transport_weighted_input(tmp_path):
    write_points(tmp_path / "a.csv", np.array([[0.0, 0, 0], [1, 0, 0]]), np.array([0.25, 0.75]))
    write_points(tmp_path / "b.csv", np.array([[0.0, 0, 0]]))
    rc, out, _ = call("transport", tmp_path / "a.csv", tmp_path / "b.csv", "--p", 2, "--eps", 1)
    assert rc == EXIT_OK
    assert float(out) == pytest.approx(0.75 * 1.0)


# -- simulate ----------------------------------------------------------------------

def simulate(tmp_path, *extra, **section):
    cfg = write_config(tmp_path / "c.json", simulate=section)
    return call("simulate", "--config", cfg, "--out-dir", tmp_path, *extra)


def test_simulate_two_point_step_matches_regression(tmp_path):
    rc, _, _ = simulate(tmp_path, "--seed", 3, initial={"kind": "points", "points": TWO},
                        scheme="meanfield", dt=0.01, steps=1)
    assert rc == EXIT_OK
    V, _ = read_points(tmp_path / "final.csv")
    np.testing.assert_allclose(V, [[0.96, -0.32450881688888167, 0.10939175864550527],
                                   [-0.96, 0.13051787495708336, -0.23017096571778217]],
                               rtol=1e-13, atol=1e-15)


def test_simulate_zero_steps_returns_input(tmp_path):
    V0 = np.random.default_rng(1).standard_normal((7, 3))
    write_points(tmp_path / "init.csv", V0)
    rc, _, _ = simulate(tmp_path, "--initial", tmp_path / "init.csv", "--steps", 0)
    assert rc == EXIT_OK
    V, _ = read_points(tmp_path / "final.csv")
    np.testing.assert_array_equal(V, V0)
    assert len(read_rows(tmp_path / "timeseries.csv")) == 1


def test_simulate_coincident_ensemble_gives_constant_series(tmp_path):
    rc, _, _ = simulate(tmp_path, initial={"kind": "points", "points": [[0.5, 1, -2]] * 5},
                        steps=10)
    assert rc == EXIT_OK
    rows = read_rows(tmp_path / "timeseries.csv")
    assert len(rows) == 11
    for r in rows[1:]:
        assert {k: v for k, v in r.items() if k != "t"} == \
            {k: v for k, v in rows[0].items() if k != "t"}


def test_simulate_header_and_manifest(tmp_path):
    rc, _, _ = simulate(tmp_path, n=20, steps=4, orders=[3.0])
    assert rc == EXIT_OK
    rows = read_rows(tmp_path / "timeseries.csv")
    assert list(rows[0]) == ["t", "px", "py", "pz", "m2", "m4", "m3", "gauss", "gauss_clipped"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    validate_manifest(manifest)
    assert manifest["status"] == "ok" and manifest["steps_completed"] == 4
    assert manifest["config"]["simulate"]["n"] == 20


def test_simulate_is_deterministic(tmp_path):
    outputs = []
    for k in range(2):
        d = tmp_path / str(k)
        d.mkdir()
        assert simulate(d, "--seed", 11, n=30, steps=5)[0] == EXIT_OK
        outputs.append([(d / f).read_bytes() for f in ("timeseries.csv", "final.csv")])
    assert outputs[0] == outputs[1]


def test_simulate_abort_saves_last_state(tmp_path):
    pts = [[1e200, 0, 0], [-1e200, 0, 0]]
    with np.errstate(over="ignore", invalid="ignore"):
        rc, _, err = simulate(tmp_path, initial={"kind": "points", "points": pts}, steps=3)
    assert rc == EXIT_ABORT
    assert "numerical abort" in err
    V, _ = read_points(tmp_path / "final.csv")
    np.testing.assert_array_equal(V, pts)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    validate_manifest(manifest)
    assert manifest["status"] == "aborted" and manifest["steps_completed"] == 0


@pytest.mark.parametrize("section", [{"gamma": 1.5}, {"dt": 0}, {"n": 1}, {"scheme": "rk4"},
                                     {"initial": {"kind": "file"}}, {"bogus": 1}])
def test_simulate_rejects_bad_config(tmp_path, section):
    assert simulate(tmp_path, **section)[0] == EXIT_INPUT


# -- couple ------------------------------------------------------------------------

def couple(tmp_path, *extra):
    return call("couple", "--out-dir", tmp_path, *extra)


def test_couple_zero_perturbation_has_zero_cost(tmp_path):
    rc, _, _ = couple(tmp_path, "--cost-level", 0, "--n", 40, "--t-final", 0.2)
    assert rc == EXIT_OK
    rows = read_rows(tmp_path / "stability.csv")
    assert rows and all(float(r["aligned_cost"]) == 0.0 for r in rows)
    assert all(float(r["optimal_cost"]) == 0.0 for r in rows)


def test_couple_report_and_manifest(tmp_path):
    rc, out, _ = couple(tmp_path, "--n", 300, "--seed", 1)
    assert rc == EXIT_OK
    manifest = json.loads((tmp_path / "couple_manifest.json").read_text())
    validate_manifest(manifest)
    s = manifest["summary"]
    # halving the perturbation halves the cost at t = 1
    assert all(1.4 <= r <= 2.6 for r in s["ratios"])
    assert len(s["fitted_constant"]) == 3
    rows = read_rows(tmp_path / "stability.csv")
    assert {float(r["t"]) for r in rows} >= {0.0, 1.0}
    final = read_rows(tmp_path / "couple_final.csv")
    assert len(final) == 4 * 300


def _couple_constant(tmp_path, seed):
    d = tmp_path / f"seed{seed}"
    assert couple(d, "--n", 300, "--seed", seed)[0] == EXIT_OK
    return max(json.loads((d / "couple_manifest.json").read_text())["summary"]["fitted_constant"])


def test_couple_fitted_constant_stable_across_seed_sets(tmp_path):
    first = max(_couple_constant(tmp_path, s) for s in range(4))
    second = max(_couple_constant(tmp_path, s) for s in range(4, 8))
    assert abs(first - second) <= 0.5 * max(first, second)


def test_couple_is_deterministic(tmp_path):
    outputs = []
    for k in range(2):
        d = tmp_path / str(k)
        assert couple(d, "--n", 30, "--t-final", 0.1, "--seed", 2)[0] == EXIT_OK
        outputs.append([(d / f).read_bytes() for f in ("stability.csv", "couple_final.csv")])
    assert outputs[0] == outputs[1]


# -- moments and configuration ---------------------------------------------------------

def test_moments_command(tmp_path):
    write_points(tmp_path / "a.csv", np.array(TWO))
    rc, _, _ = call("moments", tmp_path / "a.csv", "--orders", 2, 4, "--gaussian-a", 0.6931471805599453,
                    "--out-dir", tmp_path)
    assert rc == EXIT_OK
    rows = read_rows(tmp_path / "moments.csv")
    assert [(r["kind"], float(r["value"])) for r in rows] == [("moment", 1.0), ("moment", 1.0),
                                                               ("gaussian", pytest.approx(2.0))]
    assert call("moments")[0] == EXIT_INPUT


def test_dump_config_layers_file_and_flags(tmp_path):
    rc, out, _ = call("--dump-config")
    assert rc == EXIT_OK and json.loads(out) == json.loads(json.dumps(DEFAULTS))
    cfg = write_config(tmp_path / "c.json", seed=5, simulate={"n": 9, "dt": 0.5})
    rc, out, _ = call("simulate", "--config", cfg, "--n", 12, "--dump-config")
    dumped = json.loads(out)
    assert dumped["seed"] == 5
    assert dumped["simulate"]["n"] == 12 and dumped["simulate"]["dt"] == 0.5
    assert dumped["simulate"]["steps"] == DEFAULTS["simulate"]["steps"]


def test_bad_invocations(tmp_path):
    assert call()[0] == EXIT_INPUT
    assert call("simulate", "--no-such-flag")[0] == EXIT_INPUT
    assert call("--help")[0] == EXIT_OK
    (tmp_path / "c.json").write_text("{not json")
    assert call("simulate", "--config", tmp_path / "c.json")[0] == EXIT_INPUT
    assert call("simulate", "--config", tmp_path / "missing.json")[0] == EXIT_INPUT
    (tmp_path / "v.json").write_text(json.dumps({"schema_version": 2}))
    assert call("simulate", "--config", tmp_path / "v.json")[0] == EXIT_INPUT
