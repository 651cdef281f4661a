import math

import numpy as np
import pytest

from adjcont import flow as fl
from adjcont.fd import central_jacobian, richardson_derivative
from adjcont.suites import section_checks

CORPUS = fl.load_corpus()


@pytest.mark.parametrize("case", CORPUS["segments"], ids=lambda c: c["name"])
def test_segment_corpus(case):
    fld = fl.FIELDS[case["field"]]()
    seg = fl.Segment(fld, case["x0"], case["T"], case["p"], case["n_steps"])
    s = fl.segment_sensitivities(seg)
    assert np.max(np.abs(s.X1 @ fld.f(seg.x0, seg.p) - s.fx1)) <= 1e-8
    if "X1" in case["expect"]:
        np.testing.assert_allclose(s.X1, case["expect"]["X1"], atol=case["tol"])


@pytest.mark.parametrize("name", sorted(fl.FIELDS))
def test_field_derivatives_match_fd(name):
    fld = fl.FIELDS[name]()
    rng = np.random.default_rng(5)
    x = rng.standard_normal(fld.n)
    p = rng.uniform(0.5, 1.5, fld.q)
    np.testing.assert_allclose(fld.fx(x, p), central_jacobian(lambda v: fld.f(v, p), x), atol=1e-8)
    np.testing.assert_allclose(fld.fp(x, p), central_jacobian(lambda q: fld.f(x, q), p), atol=1e-8)


def test_parameter_sensitivity_matches_fd():
    fld = fl.hopf_field()
    x0, p, T = np.array([0.5, 0.3]), np.array([1.0, 1.5, 0.4]), 2.0
    s = fl.segment_sensitivities(fl.Segment(fld, x0, T, p, 400))
    x1 = lambda q: fl.segment_sensitivities(fl.Segment(fld, x0, T, q, 400)).x1
    np.testing.assert_allclose(s.P1, central_jacobian(x1, p), atol=1e-8)


@pytest.mark.parametrize("omega", [1.0, 1.5, 2.0])
def test_hopf_period_sensitivity(omega):
    fld = fl.hopf_field()
    p = np.array([1.0, omega, 0.0])
    s = fl.segment_sensitivities(fl.Segment(fld, [1.0, 0.0], 2 * math.pi / omega, p, 1000))
    dT = fl.period_sensitivity(fl.periodic_left_eigenvector(s), s.P1)
    assert dT[1] == pytest.approx(-2 * math.pi / omega**2, abs=1e-6)


def test_periodic_orbit_newton_recovers_circle():
    fld = fl.hopf_field()
    sec = fl.Section(lambda x, p: x[1], lambda x, p: np.array([0.0, 1.0]), lambda x, p: np.zeros(3))
    x0, T = fl.periodic_orbit(fld, [1.0, 2.0, 0.3], [1.1, 0.0], 2.5, sec)
    assert np.linalg.norm(x0) == pytest.approx(1.0, abs=1e-8)
    assert T == pytest.approx(2 * math.pi / 2.3, abs=1e-8)


def test_asymptotic_phase_shear_free():
    fld = fl.hopf_field()
    p = np.array([1.0, 2.0, 0.0])
    x0 = np.array([1.0, 0.0])
    s = fl.segment_sensitivities(fl.Segment(fld, x0, math.pi, p, 1000))
    lam = fl.asymptotic_phase_gradient(s, x0, p, fld)
    f0 = fld.f(x0, p)
    assert lam @ f0 == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(lam, f0 / (f0 @ f0), atol=1e-6)


def test_asymptotic_phase_with_shear_is_tilted():
    fld = fl.hopf_field()
    beta, om, ka = 1.0, 2.0, 0.5
    p = np.array([beta, om, ka])
    sec = fl.Section(lambda x, p: x[1], lambda x, p: np.array([0.0, 1.0]), lambda x, p: np.zeros(3))
    x0, T = fl.periodic_orbit(fld, p, [1.0, 0.0], 2 * math.pi / (om + ka), sec)
    s = fl.segment_sensitivities(fl.Segment(fld, x0, T, p, 1000))
    lam = fl.asymptotic_phase_gradient(s, x0, p, fld)
    assert lam @ fld.f(x0, p) == pytest.approx(1.0, abs=1e-12)
    # isochrons theta + ka ln r give grad = (ka, 1) / (om + ka beta) at (1, 0)
    np.testing.assert_allclose(lam, np.array([ka, 1.0]) / (om + ka * beta), atol=1e-6)


def test_section_sensitivities_match_simulation():
    for c in section_checks():
        assert c.ok, (c.name, c.detail)


@pytest.mark.parametrize("case", CORPUS["junctions"], ids=lambda c: c["name"])
def test_ball_saltation(case):
    j = fl.bouncing_ball_junction(case["gamma"], case["r"], case["v_in"])
    D = fl.saltation(j)
    np.testing.assert_allclose(D["dxD"], fl.ball_saltation_exact(case["gamma"], case["r"], case["v_in"]),
                               atol=1e-12)
    d = 1e-5
    fd = np.column_stack([(fl.zero_time_map(j, j.x0 + d * e) - fl.zero_time_map(j, j.x0 - d * e)) / (2 * d)
                          for e in np.eye(2)])
    np.testing.assert_allclose(D["dxD"], fd, atol=1e-6)


def test_tangential_impact_raises():
    with pytest.raises(fl.TangencyError):
        fl.saltation(fl.bouncing_ball_junction(v_in=0.0))


def test_non_simple_eigenvalue_raises():
    with pytest.raises(fl.EigenvalueError):
        fl._left_kernel(np.zeros((2, 2)))


def test_segment_rejects_bad_steps():
    with pytest.raises(ValueError):
        fl.Segment(fl.linear_field(), [1.0], 1.0, [1.0], 0)


@pytest.fixture(scope="module")
def impact_orbit():
    c = CORPUS["hybrid"][0]
    return fl.impact_hopf_orbit(c["beta"], c["omega"], c["kappa"], c["r"])


def test_hybrid_left_eigenvector(impact_orbit):
    dT, lam, m = fl.hybrid_period_sensitivity(impact_orbit)
    np.testing.assert_allclose(lam @ m["Gx"], lam, atol=1e-10)
    assert lam @ impact_orbit.f1.f(impact_orbit.x0, impact_orbit.p) == pytest.approx(1.0)
    assert impact_orbit.T == pytest.approx(4.8575, abs=1e-4)


@pytest.mark.slow
def test_hybrid_period_sensitivity_matches_simulation(impact_orbit):
    dT, _, _ = fl.hybrid_period_sensitivity(impact_orbit)
    for k in range(4):
        def T_of(x):
            q = impact_orbit.p.copy()
            q[k] = x
            return fl.hybrid_period_by_simulation(q, impact_orbit.x0[1])
        assert dT[k] == pytest.approx(richardson_derivative(T_of, impact_orbit.p[k], 1e-3), abs=1e-4)
