"""Invariant circles of a Neimark-Sacker normal form map.

The curve is sampled at ``q`` points ``v_i ~ v(2 pi (i-1)/q)``; the map
advances the sample index by ``p``, so that at zero rotation offset the
samples form a period-``q`` orbit that winds ``p`` times around the curve.
All index arithmetic below is 0-based: instance ``j`` maps to ``(j + p) % q``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .continuation import ActiveSet, Chart, Settings, continue_branch, correct_at
from .problem import ProblemBuilder, ProblemError, linear_d2

log = logging.getLogger(__name__)

ALPHA = 0.25
A_COEF = -0.25
R1 = 0.0
MX, MY, MR2, MB, MDRHO = slice(0, 2), slice(2, 4), 4, 5, 6
FIBONACCI_MESHES = ((34, 55), (89, 144), (233, 377))
_J = np.array([[0.0, -1.0], [1.0, 0.0]])


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class NSMap:
    """``M(x) = ((1+alpha) R + |x|^2 R [[a,-b],[b,a]] + diag(r1, r2)) x``."""

    theta: float
    alpha: float = ALPHA
    a: float = A_COEF
    r1: float = R1

    @classmethod
    def rational(cls, p, q, **kw):
        return cls(2 * math.pi * p / q, **kw)

    @property
    def R(self):
        return rotation(self.theta)

    def _A(self, b):
        return np.array([[self.a, -b], [b, self.a]])

    def __call__(self, x, r2, b):
        x = np.asarray(x, float)
        R = self.R
        return ((1 + self.alpha) * R + (x @ x) * R @ self._A(b) + np.diag([self.r1, r2])) @ x

    def dx(self, x, r2, b):
        x = np.asarray(x, float)
        RA = self.R @ self._A(b)
        return ((1 + self.alpha) * self.R + (x @ x) * RA + np.diag([self.r1, r2])
                + 2 * np.outer(RA @ x, x))

    def dr2(self, x, r2, b):
        return np.array([0.0, x[1]])

    def db(self, x, r2, b):
        x = np.asarray(x, float)
        return (x @ x) * self.R @ _J @ x

    def hess_l(self, x, r2, b, l):
        """Hessian of ``l . M`` with respect to ``(x1, x2, r2, b)``."""
        x = np.asarray(x, float)
        c = self.R.T @ np.asarray(l, float)
        Atc = self._A(b).T @ c
        H = np.zeros((4, 4))
        H[:2, :2] = 2 * (c @ self._A(b) @ x) * np.eye(2) + 2 * np.outer(x, Atc) + 2 * np.outer(Atc, x)
        H[1, 2] = H[2, 1] = l[1]
        gb = 2 * x * (c @ _J @ x) + (x @ x) * (_J.T @ c)
        H[:2, 3] = H[3, :2] = gb
        return H

    def batch(self, X, r2, b):
        """Apply the map to the columns of a 2 x n array."""
        X = np.asarray(X, float)
        n2 = np.sum(X * X, axis=0)
        R = self.R
        return ((1 + self.alpha) * R @ X + n2 * (R @ self._A(b) @ X)
                + np.array([[self.r1], [r2]]) * X)

    def batch_dx(self, X, r2, b):
        """Jacobians at the columns of ``X`` as an n x 2 x 2 array."""
        X = np.asarray(X, float)
        n2 = np.sum(X * X, axis=0)
        RA = self.R @ self._A(b)
        base = (1 + self.alpha) * self.R + np.diag([self.r1, r2])
        RAx = (RA @ X).T
        return base + n2[:, None, None] * RA + 2 * RAx[:, :, None] * X.T[:, None, :]


def ns_map(x, r2, b, theta=2 * math.pi * 233 / 377):
    """Map value and its derivatives ``(M, dMx, dMr2, dMb)``."""
    m = NSMap(theta)
    return m(x, r2, b), m.dx(x, r2, b), m.dr2(x, r2, b), m.db(x, r2, b)


def unit_circle(q, radius=math.sqrt(-ALPHA / A_COEF)):
    phi = 2 * math.pi * np.arange(q) / q
    return radius * np.vstack([np.cos(phi), np.sin(phi)])


@dataclass
class CurveProblem:
    builder: ProblemBuilder
    nsmap: NSMap
    p: int
    q: int
    muidx: np.ndarray  # 7 x q
    maidx: np.ndarray  # 7 x q
    v0: np.ndarray

    def assemble(self):
        return self.builder.assemble()


def build_curve_problem(q=377, p_rot=233, v0=None, r2=0.0, b=0.0, drho=0.0,
                        adjoint=True, event=("A", "r2", -0.16)):
    """Staged construction of the discretized invariant-curve problem.

    Blocks: ``M<i>`` (map residual per sample), ``bc<i>`` (coupling through
    the rotated index), ``pglue<i>`` (shared parameters), ``phasecond`` and the
    parameter monitors ``pars`` with labels ``r2``, ``b``, ``drho``.  With
    ``adjoint=True`` every block gets an adjoint, and the ``drho`` multiplier
    starts at 1.
    """
    if q < 2 or math.gcd(p_rot, q) != 1:
        raise ProblemError(f"(p, q) = ({p_rot}, {q}) must be coprime with q >= 2")
    m = NSMap.rational(p_rot, q)
    v0 = unit_circle(q) if v0 is None else np.asarray(v0, float).reshape(2, q)
    prob = ProblemBuilder()
    muidx = np.zeros((7, q), np.intp)

    def mres(u):
        return m(u[MX], u[MR2], u[MB]) - u[MY]

    def dmres(u):
        x, pr2, pb = u[MX], u[MR2], u[MB]
        return np.hstack([m.dx(x, pr2, pb), -np.eye(2), m.dr2(x, pr2, pb)[:, None],
                          m.db(x, pr2, pb)[:, None], np.zeros((2, 1))])

    sel = np.array([0, 1, 4, 5])

    def d2mres(u, l):
        G = np.zeros((7, 7))
        G[np.ix_(sel, sel)] = m.hess_l(u[MX], u[MR2], u[MB], l)
        return G

    for j in range(q):
        jrot = (j + p_rot) % q
        u0 = np.concatenate([v0[:, j], v0[:, jrot], [r2, b, drho]])
        muidx[:, j] = prob.add_zero_block(f"M{j + 1}", mres, dmres, u0=u0, d2=d2mres)
        if adjoint:
            prob.add_adjoint(f"M{j + 1}")

    def fbc(u):
        return u[0:2] + u[6] * q * (u[2:4] - u[0:2]) - u[4:6]

    def dbc(u):
        I = np.eye(2)
        return np.hstack([I * (1 - q * u[6]), I * q * u[6], -I, (q * (u[2:4] - u[0:2]))[:, None]])

    def d2bc(u, l):
        G = np.zeros((7, 7))
        G[0:2, 6] = -q * l
        G[2:4, 6] = q * l
        G[6, 0:2] = -q * l
        G[6, 2:4] = q * l
        return G

    for j in range(q):
        jrot, jnext = (j + p_rot) % q, (j + p_rot + 1) % q
        uidx = np.concatenate([muidx[MX, jrot], muidx[MX, jnext], muidx[MY, j], [muidx[MDRHO, j]]])
        prob.add_zero_block(f"bc{j + 1}", fbc, dbc, uidx=uidx, d2=d2bc)
        if adjoint:
            prob.add_adjoint(f"bc{j + 1}")

    par_rows = [MR2, MB, MDRHO]
    for j in range(1, q):
        prob.add_glue(f"pglue{j + 1}", muidx[par_rows, 0], muidx[par_rows, j])
        if adjoint:
            prob.add_adjoint(f"pglue{j + 1}")

    dx0 = (q * (np.roll(v0, -1, axis=1) - v0)).T.ravel()
    v0flat = v0.T.ravel()
    prob.add_zero_block("phasecond", lambda u: np.array([dx0 @ (u - v0flat)]),
                        lambda u: dx0[None, :], uidx=muidx[MX].T.ravel(), d2=linear_d2)
    if adjoint:
        prob.add_adjoint("phasecond")

    prob.add_parameters("pars", muidx[par_rows, 0], ("r2", "b", "drho"))
    if adjoint:
        prob.add_adjoint("pars", ("e.r2", "e.b", "e.drho"), l0=[0.0, 0.0, 1.0])
    if event is not None:
        prob.add_event(*event)
    maidx = muidx.copy()  # adjoint rows are keyed by u-index
    return CurveProblem(prob, m, p_rot, q, muidx, maidx, v0)


CURVE_ACTIVE = ActiveSet(("r2", "b", "e.r2", "e.b"), {"r2": (-0.9, 0.0)})


def run_curve_continuation(cp=None, settings=None, run_name="curve"):
    cp = cp or build_curve_problem()
    sys_ = cp.assemble()
    return continue_branch(sys_, Chart.initial(sys_), CURVE_ACTIVE, settings or Settings(),
                           run_name)


# -- chart accessors ----------------------------------------------------------

def curve_points(cp: CurveProblem, chart):
    """2 x q array of curve samples ``v_i``."""
    return np.asarray(chart.u)[cp.muidx[MX]]


def curve_params(cp: CurveProblem, chart):
    u = np.asarray(chart.u)
    return float(u[cp.muidx[MR2, 0]]), float(u[cp.muidx[MB, 0]]), float(u[cp.muidx[MDRHO, 0]])


def block_adjoint(system, chart, name):
    return np.asarray(chart.lam_eta)[system.adjoints[name].vidx]


def lambda_map(cp, system, chart):
    """2 x q array of map-residual multipliers ``lambda_M,i``."""
    return np.column_stack([block_adjoint(system, chart, f"M{j + 1}") for j in range(cp.q)])


def lambda_ps(system, chart):
    return float(block_adjoint(system, chart, "phasecond")[0])


def curve_tangent(v, scheme="central"):
    """Discrete derivative of the samples with respect to ``phi`` in [0, 1).

    ``forward`` is ``q (v_{i+1} - v_i)``, the coefficient used in the phase
    condition; ``central`` is ``q (v_{i+1} - v_{i-1}) / 2``.
    """
    q = v.shape[1]
    if scheme == "forward":
        return q * (np.roll(v, -1, axis=1) - v)
    if scheme == "central":
        return q * (np.roll(v, -1, axis=1) - np.roll(v, 1, axis=1)) / 2
    raise ValueError(f"unknown difference scheme {scheme!r}")


@dataclass
class CurveState:
    """A corrected curve: samples, parameters and the map."""

    v: np.ndarray
    r2: float
    b: float
    drho: float
    p: int
    q: int
    nsmap: NSMap

    @classmethod
    def from_chart(cls, cp: CurveProblem, chart):
        r2, b, drho = curve_params(cp, chart)
        return cls(curve_points(cp, chart), r2, b, drho, cp.p, cp.q, cp.nsmap)

    def jacobians(self):
        """``V_i = dM/dx(v_i)`` as a q x 2 x 2 array."""
        return self.nsmap.batch_dx(self.v, self.r2, self.b)

    def tangent(self, scheme="central"):
        return curve_tangent(self.v, scheme)


def shift_perm(p, q):
    """Permutation matrix of ``x -> x(. - rho)``: ``(P x)_i = x_{i-p}``."""
    P = np.zeros((q, q))
    P[np.arange(q), (np.arange(q) - p) % q] = 1.0
    return P


def gamma_rho_matrix(cs: CurveState):
    """Discrete ``delta -> V(. - rho) delta(. - rho) - delta`` (2q x 2q).

    Rows ``2i:2i+2`` hold ``V_{i-p} delta_{i-p} - delta_i``.
    """
    q, p = cs.q, cs.p
    V = cs.jacobians()
    G = np.zeros((2 * q, 2 * q))
    for i in range(q):
        j = (i - p) % q
        G[2 * i:2 * i + 2, 2 * j:2 * j + 2] = V[j]
    return G - np.eye(2 * q)


def apply_gamma_rho(cs: CurveState, d):
    """Matrix-free action of :func:`gamma_rho_matrix` on a 2 x q array."""
    V = cs.jacobians()
    w = np.einsum("nij,jn->in", V, d)
    return np.roll(w, cs.p, axis=1) - d


def q_phi_limit(cs: CurveState, k_max=2000, tol=1e-10, scheme="central"):
    """Stable-fiber covectors ``q_phi,i`` (2 x q), normalised to ``q_phi . v' = 1``.

    Evaluates ``v'(phi + k rho)^T / |v'(phi + k rho)|^2 V(phi)^k`` for growing
    ``k`` until successive estimates differ by less than ``tol``.
    """
    q, p = cs.q, cs.p
    V = cs.jacobians()
    vp = cs.tangent(scheme)
    w = vp / np.sum(vp * vp, axis=0)
    idx = np.arange(q)
    P = np.broadcast_to(np.eye(2), (q, 2, 2)).copy()
    prev = w.copy()
    for k in range(1, k_max + 1):
        P = np.einsum("nij,njk->nik", V[(idx + (k - 1) * p) % q], P)
        row = np.einsum("in,nij->jn", w[:, (idx + k * p) % q], P)
        row = row / np.sum(row * vp, axis=0)
        if np.max(np.abs(row - prev)) < tol:
            return row
        prev = row
    raise RuntimeError(f"q_phi limit not converged in {k_max} steps")


def fibers_from_adjoint(cp: CurveProblem, system, chart, scheme="central"):
    """Fiber covectors from the map multipliers: ``q_phi,i ~ lambda_M,i-p``.

    Normalised pointwise to ``q_phi . v' = 1`` for comparison with
    :func:`q_phi_limit`.
    """
    lam = lambda_map(cp, system, chart)
    qf = np.roll(lam, cp.p, axis=1)
    vp = curve_tangent(curve_points(cp, chart), scheme)
    return qf / np.sum(qf * vp, axis=0)


def transversal_projections(cs: CurveState, qphi, scheme="central"):
    """``q_tr,i = I - v'_i q_phi,i^T`` as a q x 2 x 2 array."""
    vp = cs.tangent(scheme)
    return np.eye(2) - np.einsum("in,jn->nij", vp, qphi)


def gamma_hat_plus_identity(cs: CurveState, qphi, scheme="central"):
    """Dense ``Gamma_hat + I``: rows ``2i:2i+2`` hold ``V_{i-p} q_tr,{i-p}``."""
    q, p = cs.q, cs.p
    B = np.einsum("nij,njk->nik", cs.jacobians(), transversal_projections(cs, qphi, scheme))
    G = np.zeros((2 * q, 2 * q))
    for i in range(q):
        j = (i - p) % q
        G[2 * i:2 * i + 2, 2 * j:2 * j + 2] = B[j]
    return G


def spectral_radius_hat(cs: CurveState, qphi=None, max_cycles=200, tol=1e-12, seed=0):
    """``max |1 + z|`` over the spectrum of the discrete ``Gamma_hat``.

    Power iteration on ``Gamma_hat + I``.  One cycle applies the operator
    ``q`` times, which returns every sample to its own index, so the cycle
    growth factor is the q-th power of the radius.
    """
    qphi = q_phi_limit(cs) if qphi is None else qphi
    B = np.einsum("nij,njk->nik", cs.jacobians(), transversal_projections(cs, qphi))
    d = np.random.default_rng(seed).standard_normal((2, cs.q))
    d /= np.linalg.norm(d)
    est = math.nan
    for _ in range(max_cycles):
        x = d
        logg = 0.0
        for _ in range(cs.q):
            x = np.roll(np.einsum("nij,jn->in", B, x), cs.p, axis=1)
            nx = np.linalg.norm(x)
            if nx == 0.0:
                return 0.0
            logg += math.log(nx)
            x = x / nx
        new = math.exp(logg / cs.q)
        d = x
        if abs(new - est) <= tol * max(1.0, new):
            return new
        est = new
    raise RuntimeError("power iteration stagnated")


def gamma_hat_spectrum(cs: CurveState, mode="radius", qphi=None):
    """Spectral data of ``Gamma_hat``.

    ``radius`` returns ``max |1 + z|`` by power iteration; ``full`` returns
    the eigenvalues of ``Gamma_hat`` and of ``Gamma_rho`` as a dict.
    """
    if mode == "radius":
        return spectral_radius_hat(cs, qphi)
    if mode == "full":
        qphi = q_phi_limit(cs) if qphi is None else qphi
        G = gamma_hat_plus_identity(cs, qphi) - np.eye(2 * cs.q)
        return {"gamma_hat": la.eigvals(G), "gamma_rho": la.eigvals(gamma_rho_matrix(cs))}
    raise ValueError(f"unknown mode {mode!r}")


def phase_decay_experiment(cs: CurveState, i0, delta0, k_max=200, qphi=None):
    """Gap ``|M^k(v + delta0) - M^k(v + v' q_phi . delta0)|`` for k = 0..k_max."""
    qphi = q_phi_limit(cs) if qphi is None else qphi
    v = cs.v[:, i0]
    delta0 = np.asarray(delta0, float)
    x = v + delta0
    y = v + cs.tangent("central")[:, i0] * (qphi[:, i0] @ delta0)
    gaps = np.empty(k_max + 1)
    m = cs.nsmap
    for k in range(k_max + 1):
        gaps[k] = np.linalg.norm(x - y)
        x = m(x, cs.r2, cs.b)
        y = m(y, cs.r2, cs.b)
    return gaps


def phase_decay_sweep(cs: CurveState, n=20, radius=1e-4, k_max=200, seed=0):
    """Decay curves for ``n`` perturbations of size ``radius`` at random mesh
    points and directions.  Returns a (k_max + 1) x n array."""
    rng = np.random.default_rng(seed)
    qphi = q_phi_limit(cs)
    cols = []
    for _ in range(n):
        ang = rng.uniform(0, 2 * math.pi)
        i0 = int(rng.integers(cs.q))
        cols.append(phase_decay_experiment(cs, i0, radius * np.array([math.cos(ang), math.sin(ang)]),
                                           k_max, qphi))
    return np.column_stack(cols)


def small_divisor_diagnostic(rho, k_max):
    """``(k, |1 - exp(-2 pi i k rho)|, running minimum)`` for k = 1..k_max."""
    out = []
    best = math.inf
    for k in range(1, k_max + 1):
        d = abs(1 - np.exp(-2j * math.pi * k * rho))
        best = min(best, d)
        out.append((k, float(d), float(best)))
    return out


def record_minima(diag):
    """Values of ``k`` at which the running minimum strictly decreases."""
    ks, best = [], math.inf
    for k, d, _ in diag:
        if d < best:
            ks.append(k)
            best = d
    return ks


def curve_at(q, p_rot, r2, settings=None):
    """Curve without adjoints at the given ``r2`` on the fixed-rotation family.

    Continues from the unit circle in ``(r2, b)`` and stops on the window
    boundary ``r2``.
    """
    cp = build_curve_problem(q, p_rot, adjoint=False, event=None)
    sys_ = cp.assemble()
    active = ActiveSet(("r2", "b"), {"r2": (min(r2, 0.0), max(r2, 0.0))})
    st = settings or Settings(hmax=0.5)
    store = continue_branch(sys_, Chart.initial(sys_), active, st, "curve_at")
    for c in store.by_type("EP"):
        if abs(c.params["r2"] - r2) <= 1e-10:
            return cp, c
    if abs(r2) <= 1e-12:
        return cp, store.charts[0]
    raise RuntimeError(f"continuation did not reach r2 = {r2}")


def drho_sensitivity_fd(cp: CurveProblem, chart, label="b", delta=1e-4, settings=None):
    """Central/Richardson FD of ``drho`` with respect to ``label`` at fixed
    other parameters (``drho`` solved for)."""
    cpu = build_curve_problem(cp.q, cp.p, v0=cp.v0, adjoint=False, event=None)
    sys_ = cpu.assemble()
    base = Chart(np.asarray(chart.u), np.asarray(chart.mu), np.zeros(0))
    x0 = chart.params[label]

    def drho(x):
        c = correct_at(sys_, base, ("drho",), {label: x}, settings)
        return c.params["drho"]

    d1 = (drho(x0 + delta) - drho(x0 - delta)) / (2 * delta)
    d2 = (drho(x0 + 2 * delta) - drho(x0 - 2 * delta)) / (4 * delta)
    return (4 * d1 - d2) / 3


# -- exports -------------------------------------------------------------------

def write_curve_csv(path, cs: CurveState, qphi):
    phi = np.arange(cs.q) / cs.q
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phi", "v1", "v2", "qphi1", "qphi2"])
        for i in range(cs.q):
            w.writerow([repr(float(x)) for x in (phi[i], *cs.v[:, i], *qphi[:, i])])


def write_decay_csv(path, gaps):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k"] + [f"gap{j + 1}" for j in range(gaps.shape[1])])
        for k, row in enumerate(gaps):
            w.writerow([k] + [repr(float(x)) for x in row])


def write_spectrum_csv(path, data):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(data, dict):
            w.writerow(["operator", "re", "im"])
            for name, ev in data.items():
                for z in ev:
                    w.writerow([name, repr(float(z.real)), repr(float(z.imag))])
        else:
            w.writerow(["quantity", "value"])
            w.writerow(["max_abs_1_plus_z", repr(float(data))])
