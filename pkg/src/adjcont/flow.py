"""Sensitivities along trajectory segments, periodic orbits and hybrid orbits.

Segments are integrated in rescaled time ``tau in [0, 1]`` with ``x' = T f(x, p)``
by fixed-step RK4.  The variational equations for ``X = dx/dx0`` and
``P = dx/dp`` are advanced by the same RK4 stages, so ``X1`` and ``P1`` are
the exact derivatives of the discrete flow map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq


class IntegrationError(RuntimeError):
    pass


class TangencyError(ValueError):
    pass


class EigenvalueError(ValueError):
    """Eigenvalue 1 of a monodromy matrix is not simple."""


@dataclass
class VectorField:
    f: Callable
    fx: Callable
    fp: Callable
    n: int
    q: int
    name: str = ""


@dataclass
class Segment:
    field: VectorField
    x0: np.ndarray
    T: float
    p: np.ndarray
    n_steps: int = 1000

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, float)
        self.p = np.asarray(self.p, float)
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


@dataclass
class SegmentSensitivity:
    x1: np.ndarray
    fx1: np.ndarray
    X1: np.ndarray
    P1: np.ndarray


@dataclass
class Section:
    """Scalar function ``h(x, p)`` whose zero level set is a section."""

    h: Callable
    hx: Callable
    hp: Callable


@dataclass
class HybridJunction:
    f1: VectorField
    f2: VectorField
    g: Callable
    gx: Callable
    gp: Callable
    event: Section
    x0: np.ndarray
    p0: np.ndarray


# -- integration --------------------------------------------------------------------

def _rk4_joint(fld: VectorField, x, T, p, n_steps):
    """RK4 for ``Z = [x | X | P]`` with ``Z' = T [f | fx X | fx P + fp]``."""
    n, q = fld.n, fld.q

    def rhs(Z):
        xx = Z[:, 0]
        A = fld.fx(xx, p)
        out = np.empty_like(Z)
        out[:, 0] = fld.f(xx, p)
        out[:, 1:] = A @ Z[:, 1:]
        out[:, 1 + n:] += fld.fp(xx, p)
        return T * out

    Z = np.zeros((n, 1 + n + q))
    Z[:, 0] = x
    Z[:, 1:1 + n] = np.eye(n)
    h = 1.0 / n_steps
    for _ in range(n_steps):
        k1 = rhs(Z)
        k2 = rhs(Z + h / 2 * k1)
        k3 = rhs(Z + h / 2 * k2)
        k4 = rhs(Z + h * k3)
        Z = Z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(Z)):
            raise IntegrationError("non-finite state during integration")
    return Z


def segment_sensitivities(seg: Segment) -> SegmentSensitivity:
    fld = seg.field
    Z = _rk4_joint(fld, seg.x0, seg.T, seg.p, seg.n_steps)
    x1 = Z[:, 0].copy()
    return SegmentSensitivity(x1, fld.f(x1, seg.p), Z[:, 1:1 + fld.n].copy(), Z[:, 1 + fld.n:].copy())


def rk4_step(fld, x, p, dt):
    k1 = fld.f(x, p)
    k2 = fld.f(x + dt / 2 * k1, p)
    k3 = fld.f(x + dt / 2 * k2, p)
    k4 = fld.f(x + dt * k3, p)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def flow(fld, x, p, t, dt=1e-3):
    """Plain RK4 flow over time ``t`` (either sign) with steps close to ``dt``."""
    x = np.asarray(x, float)
    n = max(1, int(math.ceil(abs(t) / dt)))
    h = t / n
    for _ in range(n):
        x = rk4_step(fld, x, p, h)
    return x


def simulate_to_event(fld, x, p, h, direction=0, dt=1e-3, t_max=100.0, t_min=0.0, tol=1e-13):
    """Integrate until ``h(x)`` crosses zero after time ``t_min``.

    ``direction`` > 0 (< 0) accepts only increasing (decreasing) crossings.
    The crossing time within the RK4 step is found by bisection on the
    sub-step length.  Returns ``(t_event, x_event)``.
    """
    x = np.asarray(x, float)
    t = 0.0
    h0 = h(x)
    while t < t_max:
        x1 = rk4_step(fld, x, p, dt)
        h1 = h(x1)
        if t + dt > t_min and h0 * h1 < 0 and (direction == 0 or np.sign(h1 - h0) == np.sign(direction)):
            lo, hi = 0.0, dt
            if t < t_min:
                lo = t_min - t
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                if h0 * h(rk4_step(fld, x, p, mid)) > 0:
                    lo = mid
                else:
                    hi = mid
            s = 0.5 * (lo + hi)
            return t + s, rk4_step(fld, x, p, s)
        x, h0, t = x1, h1, t + dt
    raise IntegrationError("no event before t_max")


# -- sections -------------------------------------------------------------------

def _lie(sec, x, p, fx):
    L = float(np.asarray(sec.hx(x, p)) @ fx)
    if abs(L) < 1e-10:
        raise TangencyError("trajectory is tangent to the section")
    return L


def section_sensitivities(seg: Segment, sec: Section):
    """Sensitivities of ``x(1)`` and ``T`` when the end point is constrained
    to the section ``h(x(1), p) = delta_h``."""
    s = segment_sensitivities(seg)
    p = seg.p
    f1 = s.fx1
    hx = np.atleast_1d(np.asarray(sec.hx(s.x1, p), float))
    hp = np.atleast_1d(np.asarray(sec.hp(s.x1, p), float))
    L = _lie(sec, s.x1, p, f1)
    Pi = np.eye(len(f1)) - np.outer(f1, hx) / L
    return {
        "Pi": Pi,
        "dX1_dx0": Pi @ s.X1,
        "dX1_dp": Pi @ s.P1 - np.outer(f1, hp) / L,
        "dT_dx0": -(hx @ s.X1) / L,
        "dT_dp": -(hx @ s.P1 + hp) / L,
        "dT_dh": 1.0 / L,
        "dX1_dh": f1 / L,
        "L": L,
    }


def flow_to_section(fld, x0, p, sec: Section, T_guess, delta_h=0.0, dt=1e-3):
    """Simulation oracle: first crossing of ``h = delta_h`` after ``T_guess / 2``.

    Returns ``(T, x(T))``.
    """
    return simulate_to_event(fld, x0, p, lambda x: sec.h(x, p) - delta_h, dt=dt,
                             t_min=0.5 * T_guess, t_max=2 * T_guess + 1.0)


# -- periodic orbits ---------------------------------------------------------------

def _left_kernel(A, tol=1e-6):
    U, S, Vt = np.linalg.svd(A)
    if S.size > 1 and S[-2] <= tol * max(1.0, S[0]):
        raise EigenvalueError("eigenvalue 1 is not simple")
    return U[:, -1]


def periodic_left_eigenvector(sens: SegmentSensitivity, p=None):
    """Left eigenvector ``w`` of ``X1`` at eigenvalue 1 with ``w . f(x1) = -1``."""
    w = _left_kernel(sens.X1 - np.eye(len(sens.x1)))
    return -w / (w @ sens.fx1)


def period_sensitivity(w, P1):
    """``dT/dp = w^T P1`` for ``w`` from :func:`periodic_left_eigenvector`."""
    return np.asarray(w) @ np.asarray(P1)


def periodic_orbit(fld, p, x0, T, sec: Section, n_steps=1000, tol=1e-12, max_iter=30):
    """Newton on ``x(1) - x0 = 0``, ``h(x0) = 0`` for ``(x0, T)`` of the
    discrete RK4 flow."""
    x0 = np.asarray(x0, float)
    p = np.asarray(p, float)
    n = fld.n
    for _ in range(max_iter):
        s = segment_sensitivities(Segment(fld, x0, T, p, n_steps))
        F = np.append(s.x1 - x0, sec.h(x0, p))
        if np.linalg.norm(F) < tol:
            return x0, T
        J = np.zeros((n + 1, n + 1))
        J[:n, :n] = s.X1 - np.eye(n)
        J[:n, n] = s.fx1
        J[n, :n] = sec.hx(x0, p)
        d = np.linalg.solve(J, -F)
        x0 = x0 + d[:n]
        T = T + d[n]
    raise RuntimeError("periodic orbit Newton did not converge")


def asymptotic_phase_gradient(sens: SegmentSensitivity, x0, p, fld, k_max=2**20, tol=1e-10):
    """``lim_k f(x0)^T X1^k / |f(x0)|^2`` by repeated squaring of ``X1``.

    The result ``lam`` satisfies ``lam . f(x0) = 1``.  ``(x0, T)`` must be a
    periodic orbit of the discrete flow (see :func:`periodic_orbit`).
    """
    f0 = fld.f(np.asarray(x0, float), p)
    lam = f0 / (f0 @ f0)
    M = sens.X1.copy()
    k = 1
    while k <= k_max:
        new = lam @ M
        if np.max(np.abs(new - lam)) < tol:
            return new / (new @ f0)
        lam = new
        M = M @ M
        k *= 2
    raise RuntimeError("asymptotic phase limit did not converge (orbit not stable?)")


# -- hybrid orbits ----------------------------------------------------------------

def saltation(j: HybridJunction):
    """Zero-time discontinuity mapping derivatives at a junction."""
    x0, p0 = np.asarray(j.x0, float), np.asarray(j.p0, float)
    f1 = j.f1.f(x0, p0)
    gx = np.atleast_2d(j.gx(x0, p0))
    gp = np.asarray(j.gp(x0, p0), float).reshape(len(x0), -1)
    hx = np.asarray(j.event.hx(x0, p0), float)
    hp = np.atleast_1d(np.asarray(j.event.hp(x0, p0), float))
    L = hx @ f1
    if abs(L) < 1e-10:
        raise TangencyError("trajectory is tangent to the event surface")
    lam = (j.f2.f(j.g(x0, p0), p0) - gx @ f1) / L
    return {"dxD": gx + np.outer(lam, hx), "dpD": gp + np.outer(lam, hp), "lam_es": lam}


def zero_time_map(j: HybridJunction, x, p=None, dt=1e-3):
    """``F2(-sigma) o g o F1(sigma)`` with ``sigma`` the event time from ``x``."""
    p = j.p0 if p is None else np.asarray(p, float)
    h = lambda s: j.event.h(flow(j.f1, x, p, s, dt), p)
    span = 1e-3
    while h(-span) * h(span) > 0:
        span *= 2
        if span > 1.0:
            raise TangencyError("no event time near the junction")
    sigma = brentq(h, -span, span, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return flow(j.f2, j.g(flow(j.f1, x, p, sigma, dt), p), p, -sigma, dt)


@dataclass
class HybridOrbit:
    """Two-segment orbit: section -> event (duration sigma) -> jump -> section."""

    f1: VectorField
    f2: VectorField
    g: Callable
    gx: Callable
    gp: Callable
    event: Section
    x0: np.ndarray
    sigma: float
    T: float
    p: np.ndarray
    n_steps: int = 2000


def hybrid_monodromy(orb: HybridOrbit):
    """Monodromy ``G_x``, parameter derivative ``G_p`` and the pieces used."""
    s1 = segment_sensitivities(Segment(orb.f1, orb.x0, orb.sigma, orb.p, orb.n_steps))
    j = HybridJunction(orb.f1, orb.f2, orb.g, orb.gx, orb.gp, orb.event, s1.x1, orb.p)
    D = saltation(j)
    x2 = orb.g(s1.x1, orb.p)
    s2 = segment_sensitivities(Segment(orb.f2, x2, orb.T - orb.sigma, orb.p, orb.n_steps))
    Gx = s2.X1 @ D["dxD"] @ s1.X1
    Gp = s2.X1 @ (D["dxD"] @ s1.P1 + D["dpD"]) + s2.P1
    return {"Gx": Gx, "Gp": Gp, "seg1": s1, "seg2": s2, "saltation": D}


def hybrid_period_sensitivity(orb: HybridOrbit):
    """``dT/dp = -lam_po^T G_p`` with ``lam_po`` the left eigenvector of
    ``G_x`` at 1, normalised by ``lam_po . f(x0) = 1``."""
    m = hybrid_monodromy(orb)
    lam = _left_kernel(m["Gx"] - np.eye(len(orb.x0)))
    lam = lam / (lam @ orb.f1.f(orb.x0, orb.p))
    return -lam @ m["Gp"], lam, m


# -- test fields ------------------------------------------------------------------

def hopf_field():
    """``x' = (beta - r^2) x - (omega + kappa r^2) y``, ``p = (beta, omega, kappa)``."""

    def f(x, p):
        beta, om, ka = p
        r2 = x @ x
        return (beta - r2) * x + (om + ka * r2) * np.array([-x[1], x[0]])

    def fx(x, p):
        beta, om, ka = p
        r2 = x @ x
        rot = np.array([-x[1], x[0]])
        Jr = np.array([[0.0, -1.0], [1.0, 0.0]])
        return ((beta - r2) * np.eye(2) - 2 * np.outer(x, x) + (om + ka * r2) * Jr
                + 2 * ka * np.outer(rot, x))

    def fp(x, p):
        r2 = x @ x
        rot = np.array([-x[1], x[0]])
        return np.column_stack([x, rot, r2 * rot])

    return VectorField(f, fx, fp, 2, 3, "hopf")


def linear_field():
    """Scalar ``x' = a x`` with ``p = (a,)``."""
    return VectorField(lambda x, p: p[0] * x, lambda x, p: np.array([[p[0]]]),
                       lambda x, p: np.array([[x[0]]]), 1, 1, "linear")


def gravity_field():
    """Free flight ``(x, v)' = (v, -gamma)`` with ``p = (gamma, r)``."""
    return VectorField(lambda x, p: np.array([x[1], -p[0]]),
                       lambda x, p: np.array([[0.0, 1.0], [0.0, 0.0]]),
                       lambda x, p: np.array([[0.0, 0.0], [-1.0, 0.0]]), 2, 2, "gravity")


def bouncing_ball_junction(gamma=9.81, r=0.8, v_in=-3.0):
    fld = gravity_field()
    sec = Section(lambda x, p: x[0], lambda x, p: np.array([1.0, 0.0]), lambda x, p: np.zeros(2))
    return HybridJunction(
        fld, fld,
        g=lambda x, p: np.array([x[0], -p[1] * x[1]]),
        gx=lambda x, p: np.array([[1.0, 0.0], [0.0, -p[1]]]),
        gp=lambda x, p: np.array([[0.0, 0.0], [0.0, -x[1]]]),
        event=sec, x0=np.array([0.0, v_in]), p0=np.array([gamma, r]))


def ball_saltation_exact(gamma, r, v_in):
    """Closed-form saltation matrix of an impact at speed ``v_in < 0``."""
    return np.array([[-r, 0.0], [-gamma * (1 + r) / v_in, -r]])


def _extend(fld: VectorField, extra):
    """Append ``extra`` parameters that the field does not depend on."""
    def fp(x, p):
        return np.hstack([fld.fp(x, p[:fld.q]), np.zeros((fld.n, extra))])
    return VectorField(lambda x, p: fld.f(x, p[:fld.q]), lambda x, p: fld.fx(x, p[:fld.q]),
                       fp, fld.n, fld.q + extra, fld.name)


def impact_hopf_orbit(beta=1.0, omega=1.0, kappa=0.3, r=0.9, n_steps=2000, dt=1e-3):
    """Sheared Hopf flow with a jump ``x -> r x`` on ``{y = 0, x > 0}``.

    ``p = (beta, omega, kappa, r)``.  The orbit starts on the section
    ``{x = 0, y > 0}``.  Returns a :class:`HybridOrbit` on the periodic orbit
    located by simulation.
    """
    p = np.array([beta, omega, kappa, r])
    fld = _extend(hopf_field(), 1)
    event = Section(lambda x, p: x[1], lambda x, p: np.array([0.0, 1.0]), lambda x, p: np.zeros(4))
    g = lambda x, p: np.array([p[3] * x[0], x[1]])
    gx = lambda x, p: np.diag([p[3], 1.0])
    gp = lambda x, p: np.array([[0, 0, 0, x[0]], [0, 0, 0, 0]], dtype=float)
    y0, sigma, T = hybrid_period_by_simulation(p, dt=dt, return_all=True)
    return HybridOrbit(fld, fld, g, gx, gp, event, np.array([0.0, y0]), sigma, T, p, n_steps)


def _impact_return(y, p, dt):
    """One revolution from ``(0, y)``: returns ``(y_new, sigma, T)``."""
    fld = _extend(hopf_field(), 1)
    x = np.array([0.0, y])
    # pass through y = 0 from below on the x > 0 side
    t1, xe = simulate_to_event(fld, x, p, lambda z: z[1] if z[0] > 0 else -1.0, direction=1,
                               dt=dt, t_min=0.5 * dt)
    xj = np.array([p[3] * xe[0], xe[1]])
    t2, xs = simulate_to_event(fld, xj, p, lambda z: z[0] if z[1] > 0 else 1.0, direction=-1,
                               dt=dt, t_min=0.5 * dt)
    return xs[1], t1, t1 + t2


def hybrid_period_by_simulation(p, y_guess=0.95, dt=1e-3, return_all=False):
    """Period of the impacting orbit by event-detecting simulation and a
    secant iteration for the fixed point of the return map."""
    p = np.asarray(p, float)
    ya, yb = y_guess, y_guess * 1.01
    fa = _impact_return(ya, p, dt)[0] - ya
    for _ in range(50):
        fb = _impact_return(yb, p, dt)[0] - yb
        if abs(fb) < 1e-14 or fb == fa:
            break
        ya, yb, fa = yb, yb - fb * (yb - ya) / (fb - fa), fb
    y, sigma, T = _impact_return(yb, p, dt)
    return (yb, sigma, T) if return_all else T


# -- declarative corpus ---------------------------------------------------------------

def load_corpus():
    """Test cases with expected values and provenance tags."""
    with resources.files("adjcont").joinpath("data/flow_corpus.json").open() as fh:
        return json.load(fh)


FIELDS = {"hopf": hopf_field, "linear": linear_field, "gravity": gravity_field}
