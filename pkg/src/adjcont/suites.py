"""Invariant checks run by ``adjcont verify``.

Every suite returns a list of ``Check`` records so that the CLI can print one
line per property and derive its exit status.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import flow as fl
from . import invariant_curve as ic
from . import osc
from .continuation import Chart, correct, correct_at, solve_adjoint_direct
from .fd import richardson_derivative


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def __post_init__(self):
        self.ok = bool(self.ok)


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def osc_endpoint(settings=None):
    """Run-1 endpoint chart and its system."""
    store = osc.run_adjoint_homotopy(settings)
    return store.system, store.chart(osc.endpoint_label(store))


def osc_sensitivity_fd(chart, label, delta=1e-5):
    """Richardson FD of ``da`` with respect to the fixed parameter ``label``."""
    prob, _ = osc.build_osc_problem(u0=chart.u)
    sys_ = prob.assemble(adjoint=False)
    base = Chart(np.asarray(chart.u), np.asarray(chart.mu), np.zeros(0))
    x0 = chart.params[label]

    def da(x):
        return correct_at(sys_, base, ("da",), {label: x}).params["da"]

    return richardson_derivative(da, x0, delta)


def suite_adjoint_fd():
    checks = []
    sys_, end = osc_endpoint()
    for lab in ("av", "ep", "ze"):
        fd = osc_sensitivity_fd(end, lab)
        eta = end.params["e." + lab]
        checks.append(Check(f"osc d(da)/d{lab} = -e.{lab}", _rel(fd, -eta) <= 1e-3,
                            f"fd={fd:.6e} -eta={-eta:.6e}"))
    ell = solve_adjoint_direct(sys_, end, {"e.da": 1.0})
    diff = float(np.max(np.abs(ell - end.lam_eta)))
    checks.append(Check("osc homotopy = direct adjoint", diff <= 1e-8, f"max diff {diff:.2e}"))
    cp = ic.build_curve_problem(55, 34, event=None)
    csys = cp.assemble()
    c0 = correct(csys, Chart.initial(csys), ic.CURVE_ACTIVE)
    for lab in ("r2", "b"):
        fd = ic.drho_sensitivity_fd(cp, c0, lab, 1e-4)
        eta = c0.params["e." + lab]
        checks.append(Check(f"curve q=55 d(drho)/d{lab} = -e.{lab}", _rel(fd, -eta) <= 1e-3,
                            f"fd={fd:.6e} -eta={-eta:.6e}"))
    return checks


def suite_flow():
    checks = []
    corpus = fl.load_corpus()
    for case in corpus["segments"]:
        fld = fl.FIELDS[case["field"]]()
        seg = fl.Segment(fld, case["x0"], case["T"], case["p"], case["n_steps"])
        s = fl.segment_sensitivities(seg)
        f0 = fld.f(seg.x0, seg.p)
        err = float(np.max(np.abs(s.X1 @ f0 - s.fx1)))
        scale = max(1.0, float(np.max(np.abs(s.fx1))))
        checks.append(Check(f"{case['name']}: X1 f(x0) = f(x1)", err <= 1e-8 * scale, f"{err:.2e}"))
        if "X1" in case["expect"]:
            e = float(np.max(np.abs(s.X1 - np.array(case["expect"]["X1"]))))
            checks.append(Check(f"{case['name']}: X1 closed form", e <= case["tol"], f"{e:.2e}"))
    for case in corpus["periodic"]:
        fld = fl.hopf_field()
        s = fl.segment_sensitivities(fl.Segment(fld, case["x0"], case["T"], case["p"], 1000))
        dT = fl.period_sensitivity(fl.periodic_left_eigenvector(s), s.P1)
        e = float(np.max(np.abs(dT - np.array(case["expect"]["dT_dp"]))))
        checks.append(Check(f"{case['name']}: dT/dp", e <= case["tol"], f"{e:.2e}"))
    checks.extend(section_checks())
    return checks


def section_checks(d=1e-5):
    fld = fl.hopf_field()
    p = np.array([1.0, 1.5, 0.4])
    sec = fl.Section(lambda x, p: x[1] - 0.2 * x[0], lambda x, p: np.array([-0.2, 1.0]),
                     lambda x, p: np.zeros(3))
    x0 = np.array([0.6, 0.1])
    T, _ = fl.flow_to_section(fld, x0, p, sec, 2.0)
    S = fl.section_sensitivities(fl.Segment(fld, x0, T, p, 2000), sec)

    def hit(x=x0, pp=p, dh=0.0):
        return fl.flow_to_section(fld, x, pp, sec, T, dh)

    fd = {"dT_dx0": [], "dX1_dx0": [], "dT_dp": [], "dX1_dp": []}
    for e in np.eye(2):
        a, b = hit(x=x0 + d * e), hit(x=x0 - d * e)
        fd["dT_dx0"].append((a[0] - b[0]) / (2 * d))
        fd["dX1_dx0"].append((a[1] - b[1]) / (2 * d))
    for e in np.eye(3):
        a, b = hit(pp=p + d * e), hit(pp=p - d * e)
        fd["dT_dp"].append((a[0] - b[0]) / (2 * d))
        fd["dX1_dp"].append((a[1] - b[1]) / (2 * d))
    a, b = hit(dh=d), hit(dh=-d)
    fd["dT_dh"] = (a[0] - b[0]) / (2 * d)
    fd["dX1_dh"] = (a[1] - b[1]) / (2 * d)
    checks = []
    for k in ("dT_dx0", "dT_dp", "dT_dh", "dX1_dh"):
        ref = np.asarray(fd[k])
        err = float(np.max(np.abs(np.asarray(S[k]) - ref)) / max(1.0, np.max(np.abs(ref))))
        checks.append(Check(f"section {k} vs FD", err <= 1e-6, f"{err:.2e}"))
    for k in ("dX1_dx0", "dX1_dp"):
        ref = np.column_stack(fd[k])
        err = float(np.max(np.abs(S[k] - ref)) / max(1.0, np.max(np.abs(ref))))
        checks.append(Check(f"section {k} vs FD", err <= 1e-6, f"{err:.2e}"))
    return checks


def suite_saltation():
    checks = []
    for case in fl.load_corpus()["junctions"]:
        j = fl.bouncing_ball_junction(case["gamma"], case["r"], case["v_in"])
        D = fl.saltation(j)
        d = 1e-5
        fd = np.column_stack([(fl.zero_time_map(j, j.x0 + d * e) - fl.zero_time_map(j, j.x0 - d * e))
                              / (2 * d) for e in np.eye(2)])
        err = float(np.max(np.abs(D["dxD"] - fd)))
        checks.append(Check(f"{case['name']}: saltation vs FD", err <= 1e-6, f"{err:.2e}"))
    for case in fl.load_corpus()["hybrid"]:
        orb = fl.impact_hopf_orbit(case["beta"], case["omega"], case["kappa"], case["r"])
        dT, lam, _ = fl.hybrid_period_sensitivity(orb)
        for k, name in enumerate(("beta", "omega", "kappa", "r")):
            def T_of(x, k=k):
                pp = orb.p.copy()
                pp[k] = x
                return fl.hybrid_period_by_simulation(pp, orb.x0[1])
            fd = richardson_derivative(T_of, orb.p[k], 1e-3)
            err = abs(dT[k] - fd)
            checks.append(Check(f"{case['name']}: dT/d{name} vs simulation", err <= 1e-4,
                                f"{err:.2e}"))
    return checks


def suite_curve():
    checks = []
    cp = ic.build_curve_problem(55, 34, event=None)
    sys_ = cp.assemble()
    c0 = correct(sys_, Chart.initial(sys_), ic.CURVE_ACTIVE)
    cs = ic.CurveState.from_chart(cp, c0)
    lp = abs(ic.lambda_ps(sys_, c0))
    checks.append(Check("lambda_ps = 0", lp <= 1e-8, f"{lp:.2e}"))
    qphi = ic.q_phi_limit(cs)
    qa = ic.fibers_from_adjoint(cp, sys_, c0)
    err = float(np.max(np.abs(qa - qphi)) / np.max(np.abs(qphi)))
    checks.append(Check("fiber limit = adjoint fibers", err <= 1e-3, f"{err:.2e}"))
    r = ic.spectral_radius_hat(cs, qphi)
    checks.append(Check("max|1+z| = 1/2 at (0,0)", abs(r - 0.5) <= 1e-3, f"{r:.6f}"))
    vals = []
    for p, q in ic.FIBONACCI_MESHES:
        cpq, c = ic.curve_at(q, p, -0.16)
        csq = ic.CurveState.from_chart(cpq, c)
        vals.append(float(np.max(np.linalg.norm(ic.apply_gamma_rho(csq, csq.tangent("forward")),
                                                axis=0))))
    qs = np.array([q for _, q in ic.FIBONACCI_MESHES], float)
    slope = -np.polyfit(np.log(qs), np.log(vals), 1)[0]
    checks.append(Check("Gamma_rho[v'] = O(1/q)", 0.8 <= slope <= 1.2, f"exponent {slope:.3f}"))
    return checks


SUITES = {
    "flow": suite_flow,
    "saltation": suite_saltation,
    "adjoint-fd": suite_adjoint_fd,
    "curve": suite_curve,
}


def golden_minima(k_max=200):
    rho = (math.sqrt(5) - 1) / 2
    return ic.record_minima(ic.small_divisor_diagnostic(rho, k_max))
