import warnings

import numba
import numpy as np
import pytest

# numba warns once that the bundled TBB is too old and falls back to another layer
warnings.filterwarnings("ignore", message=".*TBB", category=numba.NumbaWarning)

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_verify(tmp_path_factory):
    """One run of ``landaulab verify`` with the default configuration.

    Shared by the CLI test and the acceptance criteria that read the suites.
    """
    import io
    import json
    import re

    from landaulab.cli import main

    out_dir = tmp_path_factory.mktemp("verify")
    out, err = io.StringIO(), io.StringIO()
    rc = main(["verify", "--out-dir", str(out_dir)], out=out, err=err)
    timings = {m.group(1): float(m.group(2))
               for m in re.finditer(r"^suite (\w+) finished in ([\d.]+) s$", out.getvalue(), re.M)}
    report = json.loads((out_dir / "verify_report.json").read_text())
    return {"rc": rc, "report": report, "timings": timings, "stdout": out.getvalue(),
            "stderr": err.getvalue()}
