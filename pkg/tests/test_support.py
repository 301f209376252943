import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from landaulab import initial, io, rng as rngmod
from landaulab.moments import empirical_moment


# -- counter-based streams ---------------------------------------------------------

def test_streams_are_keyed_and_order_free():
    a = rngmod.stream(7, 3, 2, 1).standard_normal(5)
    rngmod.stream(7, 0, 0, 1).standard_normal(100)
    b = rngmod.stream(7, 3, 2, 1).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    for other in [(8, 3, 2, 1), (7, 4, 2, 1), (7, 3, 3, 1), (7, 3, 2, 2)]:
        assert not np.array_equal(a, rngmod.stream(*other).standard_normal(5))


def test_row_normals_rows_match_their_streams():
    rows = rngmod.row_normals(1, 2, 4, (3, 3))
    for i in range(4):
        np.testing.assert_array_equal(rows[i], rngmod.stream(1, 2, i, rngmod.TAG_PAIRWISE)
                                      .standard_normal((3, 3)))
    with pytest.raises(ValueError):
        rngmod.row_normals(1, 2, 4, (3, 3), out=np.empty((4, 3)))


def test_large_seeds_are_accepted():
    x = rngmod.block_normals(2**64 - 1, 2**40, (2, 3))
    assert x.shape == (2, 3) and np.all(np.isfinite(x))
    # neighbouring seeds above 2^63 must stay distinct keys
    assert not np.array_equal(rngmod.stream(2**64 - 1, 0).standard_normal(3),
                              rngmod.stream(2**64 - 2, 0).standard_normal(3))


# -- initial conditions ---------------------------------------------------------------

def test_gaussian_temperatures():
    V = initial.gaussian(0, 200_000, temperatures=(2.0, 1.0, 0.5))
    np.testing.assert_allclose(V.var(axis=0), [2.0, 1.0, 0.5], rtol=0.02)
    with pytest.raises(ValueError):
        initial.gaussian(0, 3, temperatures=(-1, 1, 1))


def test_uniform_ball_and_line():
    V = initial.uniform_ball(1, 10_000, radius=2.0)
    r = np.linalg.norm(V, axis=1)
    assert r.max() <= 2.0
    # m_2 of the uniform ball is 3 R^2 / 5
    assert empirical_moment(V, 2) == pytest.approx(12 / 5, rel=0.03)
    L = initial.line(2, 100, direction=(0, 3.0, 4.0))
    np.testing.assert_allclose(np.cross(L, [0, 0.6, 0.8]), 0.0, atol=1e-12)


def test_two_point_weights():
    V = initial.two_point(3, 10_000, weight=0.25)
    assert np.mean(V[:, 0] > 0) == pytest.approx(0.25, abs=0.02)


def test_heavy_tail_energy_and_tail():
    V = initial.heavy_tail(4, 1_000_000, index=6.0, energy=1.0)
    r = np.linalg.norm(V, axis=1)
    assert np.mean(r**2) == pytest.approx(1.0, rel=0.05)
    # P(|v| > t) = (1 + t/s)^-6 with s = sqrt(10)
    s = math.sqrt(10.0)
    assert np.mean(r > 3.0) == pytest.approx((1 + 3.0 / s) ** -6, rel=0.05)
    with pytest.raises(ValueError):
        initial.heavy_tail(0, 10, index=2.0)


def test_make_initial_recenter_and_energy():
    V = initial.make_initial({"kind": "gaussian", "recenter": True, "energy_target": 3.0}, 500, 5)
    np.testing.assert_allclose(V.mean(axis=0), 0.0, atol=1e-14)
    assert empirical_moment(V, 2) == pytest.approx(3.0, rel=1e-13)
    with pytest.raises(ValueError):
        initial.make_initial({"kind": "nope"}, 5, 0)
    with pytest.raises(ValueError):
        initial.recenter(np.ones((4, 3)), energy=1.0)


# -- csv and json ------------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_number_format_round_trips(x):
    assert float(io.format_number(x)) == x


def test_points_round_trip(tmp_path, rng):
    P = rng.standard_normal((20, 3)) * 1e-7
    w = rng.dirichlet(np.ones(20))
    path = tmp_path / "pts.csv"
    io.write_points(path, P, w)
    Q, v = io.read_points(path)
    np.testing.assert_array_equal(Q, P)
    np.testing.assert_array_equal(v, w)
    io.write_points(path, P)
    Q, v = io.read_points(path)
    np.testing.assert_array_equal(Q, P)
    assert v is None


@pytest.mark.parametrize("text, line", [
    ("x,y,z\n1,2,3\n4,5\n", 3),
    ("1,2,3\n4,five,6\n", 2),
    ("1,2\n", 1),
    ("1,2,3\n\n4,5,nan\n", 3),
    ("x,y,z\n", 0),
])
def test_malformed_csv_reports_line(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(io.CsvError) as info:
        io.read_points(path)
    assert info.value.line == line
    assert f":{line}:" in str(info.value)


def test_json_encodes_non_finite_and_numpy(tmp_path):
    path = tmp_path / "out.json"
    io.write_json(path, {"a": np.float64(np.inf), "b": np.arange(3), "c": (np.bool_(True),),
                         2: np.int64(5)})
    data = json.loads(path.read_text())
    assert data == {"a": "inf", "b": [0, 1, 2], "c": [True], "2": 5}
