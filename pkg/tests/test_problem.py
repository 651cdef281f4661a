import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adjcont import ActiveSet, Chart, ProblemBuilder, ProblemError, correct
from adjcont import invariant_curve as ic
from adjcont import osc
from adjcont.fd import central_jacobian


def _fd_block_check(block, u_loc, tol=1e-5):
    J = block.jacobian(u_loc)
    Jfd = central_jacobian(block.evaluate, u_loc)
    return np.max(np.abs(J - Jfd)) / max(1.0, np.max(np.abs(J)))


def _fd_d2_check(block, u_loc, lb):
    G = block.d2(u_loc, lb)
    Gfd = central_jacobian(lambda v: block.jacobian(v).T @ lb, u_loc)
    return np.max(np.abs(G - Gfd)) / max(1.0, np.max(np.abs(G)))


def _shipped_problems():
    prob, _ = osc.build_osc_problem()
    yield "osc", prob, prob.u0
    cp = ic.build_curve_problem(8, 3, r2=-0.1, b=0.05, drho=0.02)
    rng = np.random.default_rng(1)
    yield "curve", cp.builder, cp.builder.u0 + 0.05 * rng.standard_normal(cp.builder.n_u)


@pytest.mark.parametrize("name,prob,u", list(_shipped_problems()), ids=lambda x: x if isinstance(x, str) else "")
def test_block_jacobians_match_fd(name, prob, u):
    rng = np.random.default_rng(0)
    for b in prob.zero_blocks + prob.monitor_blocks:
        u_loc = u[b.uidx]
        assert _fd_block_check(b, u_loc) <= 1e-5, b.name
        if b.d2 is not None:
            lb = rng.standard_normal(b.dim_out)
            assert _fd_d2_check(b, u_loc, lb) <= 1e-5, b.name


def test_osc_jacobian_away_from_start():
    u = osc.U0 + np.linspace(0.1, 0.3, 10)
    assert np.max(np.abs(central_jacobian(osc.phi_osc, u) - osc.dphi_osc(u))) <= 1e-8


def _toy(order):
    """Circle in (x, y) and a cubic in (z, w) with monitors on y and w."""
    prob = ProblemBuilder()
    blocks = {
        "circle": lambda: prob.add_zero_block(
            "circle", lambda v: np.array([v[0] ** 2 + v[1] ** 2 - 1]),
            lambda v: np.array([[2 * v[0], 2 * v[1]]]), u0=[0.6, 0.8]),
        "cubic": lambda: prob.add_zero_block(
            "cubic", lambda v: np.array([v[0] ** 3 + v[0] - v[1]]),
            lambda v: np.array([[3 * v[0] ** 2 + 1, -1.0]]), u0=[0.5, 0.6]),
    }
    for name in order:
        blocks[name]()
    y = prob.uidx("circle")[1]
    w = prob.uidx("cubic")[1]
    prob.add_monitor_block("mon", lambda v: v.copy(), lambda v: np.eye(2), labels=("y", "w"),
                           uidx=[y, w])
    prob.add_adjoint("circle")
    prob.add_adjoint("cubic")
    prob.add_adjoint("mon", ("e.y", "e.w"), l0=[1.0, 0.0])
    return prob


def test_block_order_independence():
    res = []
    for order in (("circle", "cubic"), ("cubic", "circle")):
        prob = _toy(order)
        sys_ = prob.assemble()
        active = ActiveSet(("e.y", "e.w"))
        c = correct(sys_, Chart.initial(sys_), active)
        x = {n: c.u[prob.uidx(n)] for n in ("circle", "cubic")}
        lam = {n: c.lam_eta[prob.adjoints[n].vidx] for n in ("circle", "cubic")}
        res.append((x, lam, {k: c.params[k] for k in ("y", "w", "e.y", "e.w")}))
    (x1, l1, p1), (x2, l2, p2) = res
    for n in x1:
        np.testing.assert_allclose(x1[n], x2[n], atol=1e-14)
        np.testing.assert_allclose(l1[n], l2[n], atol=1e-14)
    for k in p1:
        assert p1[k] == pytest.approx(p2[k], abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_adjoint_rows_are_linear_in_ell(a, b, seed):
    prob, _ = osc.build_osc_problem()
    sys_ = prob.assemble()
    rng = np.random.default_rng(seed)
    u = osc.U0 + 0.1 * rng.standard_normal(10)
    mu = rng.standard_normal(sys_.n_mu)
    l1, l2 = rng.standard_normal((2, sys_.n_adj))
    r = lambda l: sys_.residual(u, mu, l)[sys_.n_eq - sys_.n_u:]
    lhs = r(a * l1 + b * l2)
    rhs = a * r(l1) + b * r(l2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))


def test_full_jacobian_matches_fd_including_second_order_terms():
    prob, _ = osc.build_osc_problem()
    sys_ = prob.assemble()
    rng = np.random.default_rng(3)
    w = np.concatenate([osc.U0, rng.standard_normal(sys_.n_mu), rng.standard_normal(sys_.n_adj)])
    J = sys_.jacobian_full(*sys_.split(w))
    Jfd = central_jacobian(lambda v: sys_.residual(*sys_.split(v)), w)
    assert np.max(np.abs(J - Jfd)) <= 1e-6
    Js = sys_.jacobian_full(*sys_.split(w), sparse=True).toarray()
    np.testing.assert_array_equal(J, Js)


def test_builder_errors():
    prob = ProblemBuilder()
    prob.add_zero_block("a", lambda v: v[:1], lambda v: np.eye(1, 2), u0=[1.0, 2.0])
    with pytest.raises(ProblemError):
        prob.add_zero_block("a", lambda v: v, None, u0=[0.0])
    with pytest.raises(ProblemError):
        prob.add_zero_block("b", lambda v: v, None, uidx=[5])
    with pytest.raises(ProblemError):
        prob.add_zero_block("c", lambda v: v, None)
    prob.add_monitor_block("m", lambda v: v, lambda v: np.eye(2), labels=("p", "q"), uidx=[0, 1])
    with pytest.raises(ProblemError):
        prob.add_monitor_block("m2", lambda v: v, None, labels=("p",), uidx=[0])
    with pytest.raises(ProblemError):
        prob.add_monitor_block("m3", lambda v: v, None, labels=("r",), uidx=[0, 1])
    with pytest.raises(ProblemError):
        prob.add_adjoint("a", l0=[1.0, 2.0])
    with pytest.raises(ProblemError):
        prob.add_adjoint("zz")
    with pytest.raises(ProblemError):
        prob.add_event("E", "nope", 0.0)
    with pytest.raises(ProblemError):
        prob.add_glue("g", [0], [0, 1])


def test_state_size_mismatch_raises():
    prob, _ = osc.build_osc_problem()
    sys_ = prob.assemble()
    with pytest.raises(ProblemError):
        sys_.residual(np.zeros(9), np.zeros(4), np.zeros(sys_.n_adj))


def test_unknown_label_column():
    prob, _ = osc.build_osc_problem()
    with pytest.raises(ProblemError):
        prob.assemble().label_column("missing")


def test_assemble_without_adjoint_drops_rows():
    prob, _ = osc.build_osc_problem()
    s0, s1 = prob.assemble(adjoint=False), prob.assemble()
    assert s0.n_eq == 11 and s0.n_adj == 0
    assert s1.n_eq == 21 and s1.n_adj == 11
