"""Acceptance criteria, one test each.

Every test records a one-line verdict that is printed in the pytest terminal
summary under "acceptance criteria".
"""

import math
import time

import numpy as np
import pytest
from conftest import record

from adjcont import (ActiveSet, Chart, correct, load_run, save_run, solve_adjoint_direct)
from adjcont import flow as fl
from adjcont import invariant_curve as ic
from adjcont import osc
from adjcont.suites import osc_sensitivity_fd, suite_flow, suite_saltation

TARGET_RUN1_END = {"e.av": 4.6833, "e.ep": 7.3416, "e.ze": -1.2213}
TARGET_FOLDS = (0.92043919, 1.06205837)
TARGET_CURVE = {
    "start": {"e.r2": -5.3757e-02, "e.b": -1.5916e-01},
    "A": {"b": 4.8149e-02, "e.r2": -5.4033e-02, "e.b": -1.9790e-01},
    "end": {"b": 1.8498e-01, "e.r2": -7.5930e-02, "e.b": -9.2511e-01},
}


def check(n, ok, detail):
    record(n, ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_01_corrector():
    prob, _ = osc.build_osc_problem()
    sys_ = prob.assemble()
    t0 = time.perf_counter()
    c = correct(sys_, Chart.initial(sys_), osc.RUN1_ACTIVE)
    dt = time.perf_counter() - t0
    iters = len(c.history) - 1
    res = c.history[-1][3]
    ok = iters <= 4 and abs(c.params["da"] + 7.3832e-02) <= 1e-5 and res <= 1e-12 and dt < 1
    check(1, ok, f"da={c.params['da']:.6e} in {iters} iterations, |f|={res:.1e}, {dt:.2f}s")


def test_criterion_02_adjoint_endpoint():
    t0 = time.perf_counter()
    store = osc.run_adjoint_homotopy()
    end = store.chart(osc.endpoint_label(store))
    ell = solve_adjoint_direct(store.system, end, {"e.da": 1.0})
    dt = time.perf_counter() - t0
    direct = {k: ell[store.system.adj_labels[k]] for k in TARGET_RUN1_END}
    err_h = max(abs(end.params[k] - v) for k, v in TARGET_RUN1_END.items())
    err_d = max(abs(direct[k] - v) for k, v in TARGET_RUN1_END.items())
    agree = float(np.max(np.abs(ell - end.lam_eta)))
    ok = err_h <= 1e-3 and err_d <= 1e-3 and agree <= 1e-8 and dt < 5
    check(2, ok, f"max err homotopy {err_h:.1e}, direct {err_d:.1e}, agreement {agree:.1e}, {dt:.2f}s")


def test_criterion_03_folds(osc_runs):
    fps = sorted(c.params["av"] for c in osc_runs["run2"].by_type("FP"))
    oracle = osc.fold_roots()
    sextic = osc.inflection_roots()
    e_av = max(abs(c.params["e.av"]) for c in osc_runs["run2"].by_type("FP"))
    ok = (len(fps) == 2
          and all(abs(a - b) <= 1e-4 for a, b in zip(fps, TARGET_FOLDS))
          and all(abs(a - b) <= 1e-8 for a, b in zip(fps, oracle))
          and all(abs(osc.inflection_residual(r, 0.1)) <= 1e-10 for r in sextic)
          and all(abs(osc.delta_slope(a, 0.01, 0.1)) <= 5e-7 for a in TARGET_FOLDS)
          and all(abs(a - r) <= 2e-4 for a, r in zip(fps, sextic))
          and e_av <= 1e-5 and osc_runs["t2"] < 60)
    check(3, ok, f"FP av={fps[0]:.8f}, {fps[1]:.8f}; slope roots {oracle[0]:.8f}, {oracle[1]:.8f};"
                 f" sextic roots {sextic[0]:.6f}, {sextic[1]:.6f}; max|e.av|={e_av:.1e};"
                 f" run {osc_runs['t2']:.1f}s")


def test_criterion_04_run2_endpoints(osc_runs):
    ends = {round(c.params["av"], 10): c.params["da"] for c in osc_runs["run2"].by_type("EP")}
    hi, lo = ends.get(2.5), ends.get(0.5)
    ok = (hi is not None and lo is not None
          and abs(hi + 1.7965e-03) <= 1e-5 and abs(lo - 1.6854e-02) <= 1e-4)
    check(4, ok, f"da(2.5)={hi:.6e}, da(0.5)={lo:.6e}")


def _curve_charts(store):
    start = store.charts[0]
    a = store.by_type("A")[0]
    end = min(store.by_type("EP"), key=lambda c: c.params["r2"])
    return {"start": start, "A": a, "end": end}


@pytest.mark.slow
def test_criterion_05_curve_branch(curve377):
    charts = _curve_charts(curve377["store"])
    worst = 0.0
    for key, ref in TARGET_CURVE.items():
        for lab, v in ref.items():
            worst = max(worst, abs(charts[key].params[lab] - v) / abs(v))
    a = charts["A"].params
    slope = -a["e.r2"] / a["e.b"]
    r2_ok = (abs(charts["start"].params["r2"]) <= 1e-12 and abs(a["r2"] + 0.16) <= 1e-8
             and abs(charts["end"].params["r2"] + 0.9) <= 1e-10)
    ok = worst <= 1e-3 and abs(slope + 0.273) <= 2e-3 and r2_ok and curve377["seconds"] < 600
    check(5, ok, f"max rel err {worst:.1e}, slope at A {slope:.5f}, {len(curve377['store'].charts)}"
                 f" charts in {curve377['seconds']:.0f}s")


@pytest.mark.slow
def test_criterion_06_adjoint_vs_fd(osc_runs, curve377):
    end = osc_runs["end"]
    errs = []
    for lab in ("av", "ep", "ze"):
        fd = osc_sensitivity_fd(end, lab, 1e-5)
        errs.append(abs(fd + end.params["e." + lab]) / abs(end.params["e." + lab]))
    cp = curve377["cp"]
    a = curve377["store"].by_type("A")[0]
    for lab in ("r2", "b"):
        fd = ic.drho_sensitivity_fd(cp, a, lab, 1e-5)
        errs.append(abs(fd + a.params["e." + lab]) / abs(a.params["e." + lab]))
    ok = max(errs) <= 1e-3
    check(6, ok, "relative errors osc (av, ep, ze) " + ", ".join(f"{e:.1e}" for e in errs[:3])
          + "; curve (r2, b) " + ", ".join(f"{e:.1e}" for e in errs[3:]))


def test_criterion_07_flow_identities():
    checks = suite_flow() + suite_saltation()
    fld = fl.hopf_field()
    worst = 0.0
    for om in (1.0, 2.0):
        p = np.array([1.0, om, 0.0])
        s = fl.segment_sensitivities(fl.Segment(fld, [1.0, 0.0], 2 * math.pi / om, p, 1000))
        dT = fl.period_sensitivity(fl.periodic_left_eigenvector(s), s.P1)
        worst = max(worst, abs(dT[1] + 2 * math.pi / om**2))
    failed = [c.name for c in checks if not c.ok]
    ok = not failed and worst <= 1e-6
    check(7, ok, f"{len(checks) - len(failed)}/{len(checks)} flow/saltation checks,"
                 f" dT/domega err {worst:.1e}" + (f"; failed: {failed}" if failed else ""))


@pytest.mark.slow
def test_criterion_08_asymptotic_phase(curve377):
    fld = fl.hopf_field()
    p = np.array([1.0, 2.0, 0.0])
    x0 = np.array([1.0, 0.0])
    s = fl.segment_sensitivities(fl.Segment(fld, x0, math.pi, p, 1000))
    lam = fl.asymptotic_phase_gradient(s, x0, p, fld)
    f0 = fld.f(x0, p)
    err_norm = abs(lam @ f0 - 1)
    err_shape = float(np.max(np.abs(lam - f0 / (f0 @ f0))))
    cp = curve377["cp"]
    cs = ic.CurveState.from_chart(cp, curve377["store"].by_type("A")[0])
    gaps = ic.phase_decay_sweep(cs, n=20, radius=1e-4, k_max=200)
    plateau = float(np.max(gaps[-1]))
    ok = err_norm <= 1e-6 and err_shape <= 1e-6 and gaps.shape[1] == 20 and plateau <= 1e-6
    check(8, ok, f"lam.f-1={err_norm:.1e}, |lam-f/|f|^2|={err_shape:.1e},"
                 f" max final gap over 20 ICs {plateau:.1e}")


@pytest.mark.slow
def test_criterion_09_spectral(curve377):
    cp = curve377["cp"]
    charts = _curve_charts(curve377["store"])
    radii = {k: ic.spectral_radius_hat(ic.CurveState.from_chart(cp, c)) for k, c in charts.items()}
    vals = []
    for p, q in ic.FIBONACCI_MESHES:
        cpq, c = ic.curve_at(q, p, -0.16)
        csq = ic.CurveState.from_chart(cpq, c)
        vals.append(float(np.max(np.linalg.norm(ic.apply_gamma_rho(csq, csq.tangent("forward")), axis=0))))
    qs = np.array([q for _, q in ic.FIBONACCI_MESHES], float)
    expo = -np.polyfit(np.log(qs), np.log(vals), 1)[0]
    ok = (all(r < 1 for r in radii.values()) and abs(radii["start"] - 0.5) <= 1e-3
          and 0.8 <= expo <= 1.2)
    check(9, ok, "max|1+z| " + ", ".join(f"{k} {v:.4f}" for k, v in radii.items())
          + f"; |Gamma_rho[v']| exponent {expo:.3f}")


def test_criterion_10_framework(osc_runs, tmp_path):
    from test_problem import _fd_block_check, _fd_d2_check, _shipped_problems, _toy

    prob, _ = osc.build_osc_problem()
    sys_ = prob.assemble()
    rng = np.random.default_rng(0)
    u, mu = osc.U0, rng.standard_normal(4)
    l1, l2 = rng.standard_normal((2, sys_.n_adj))
    adj = lambda l: sys_.residual(u, mu, l)[sys_.n_eq - sys_.n_u:]
    lin = float(np.max(np.abs(adj(2.5 * l1 - 0.7 * l2) - 2.5 * adj(l1) + 0.7 * adj(l2))))

    res = []
    for order in (("circle", "cubic"), ("cubic", "circle")):
        p = _toy(order)
        s = p.assemble()
        c = correct(s, Chart.initial(s), ActiveSet(("e.y", "e.w")))
        res.append(np.concatenate([c.u[p.uidx("circle")], c.u[p.uidx("cubic")],
                                   [c.params[k] for k in ("e.y", "e.w")]]))
    order_err = float(np.max(np.abs(res[0] - res[1])))

    store = osc_runs["run2"]
    save_run(store, tmp_path)
    back = load_run(tmp_path, store.run_name)
    same = all(np.array_equal(a.u, b.u) and np.array_equal(a.lam_eta, b.lam_eta)
               and a.params == b.params for a, b in zip(store.charts, back.charts))

    jac = 0.0
    for _, pb, uu in _shipped_problems():
        for b in pb.zero_blocks + pb.monitor_blocks:
            jac = max(jac, _fd_block_check(b, uu[b.uidx]))
            if b.d2 is not None:
                jac = max(jac, _fd_d2_check(b, uu[b.uidx], rng.standard_normal(b.dim_out)))
    ok = lin <= 1e-12 and order_err <= 1e-12 and same and jac <= 1e-5
    check(10, ok, f"linearity {lin:.1e}, order independence {order_err:.1e},"
                  f" round trip {'exact' if same else 'differs'}, worst Jacobian FD err {jac:.1e}")
