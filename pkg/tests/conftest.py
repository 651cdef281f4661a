import time

import pytest

from adjcont import invariant_curve as ic
from adjcont import save_run
from adjcont import osc

ACCEPTANCE = {}


def record(n, ok, detail):
    """Remember an acceptance verdict for the terminal summary."""
    prev = ACCEPTANCE.get(n)
    ok = bool(ok) and (prev is None or prev[0])
    ACCEPTANCE[n] = (ok, detail if prev is None else f"{prev[1]}; {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def osc_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("osc")
    t0 = time.perf_counter()
    s1 = osc.run_adjoint_homotopy()
    t1 = time.perf_counter() - t0
    save_run(s1, root)
    lab = osc.endpoint_label(s1)
    t0 = time.perf_counter()
    s2 = osc.run_frequency_sweep(root, s1.run_name, lab)
    t2 = time.perf_counter() - t0
    save_run(s2, root)
    return {"root": root, "run1": s1, "run2": s2, "end": s1.chart(lab), "t1": t1, "t2": t2}


@pytest.fixture(scope="session")
def curve377():
    """Full-size invariant-curve branch with adjoints (a few minutes)."""
    cp = ic.build_curve_problem()
    t0 = time.perf_counter()
    store = ic.run_curve_continuation(cp)
    return {"cp": cp, "store": store, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def curve55():
    cp = ic.build_curve_problem(55, 34)
    return {"cp": cp, "store": ic.run_curve_continuation(cp)}
