"""Damped Newton correction and pseudo-arclength continuation.

The unknowns of a run are the continuation variables ``u``, every adjoint
variable that is not exposed as a complementary parameter, and the released
continuation parameters (ordinary ``mu`` labels or complementary ``e.*``
labels).  Fixed parameters keep the value stored in the starting chart.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .problem import AugmentedSystem, ProblemError

log = logging.getLogger(__name__)


class ContinuationError(RuntimeError):
    pass


class CorrectorError(ContinuationError):
    """Newton iteration did not converge."""


class SingularJacobianError(ContinuationError):
    pass


class BranchPointError(ContinuationError):
    """The solution manifold is not one-dimensional at a chart."""


@dataclass
class Settings:
    TOL: float = 1e-6
    h0: float = 0.1
    hmin: float = 1e-5
    hmax: float = 0.5
    MaxIter: int = 10
    ItMX: int = 100
    NPR: int = 100
    sparse: Optional[bool] = None

    def validate(self):
        for name in ("TOL", "h0", "hmin", "hmax"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.hmin > self.hmax:
            raise ValueError("hmin must not exceed hmax")
        for name in ("MaxIter", "ItMX", "NPR"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        return self


@dataclass
class ActiveSet:
    released: tuple = ()
    windows: dict = field(default_factory=dict)

    def __post_init__(self):
        self.released = tuple(self.released)
        for lab, win in self.windows.items():
            lo, hi = win
            if lo > hi:
                raise ValueError(f"empty window for {lab!r}")


@dataclass
class Chart:
    """A point on a solution manifold."""

    u: np.ndarray
    mu: np.ndarray
    lam_eta: np.ndarray
    tangent: Optional[np.ndarray] = None
    label: int = 0
    type_tag: str = ""
    norms: tuple = (math.nan, math.nan, math.nan)
    params: dict = field(default_factory=dict)
    history: list = field(default_factory=list, repr=False)

    @classmethod
    def initial(cls, system: AugmentedSystem):
        return cls.from_state(system, system.initial_state())

    @classmethod
    def from_state(cls, system, w, **kw):
        u, mu, ell = system.split(w)
        c = cls(u.copy(), mu.copy(), ell.copy(), **kw)
        c.params = _params(system, c)
        return c

    @property
    def state(self):
        return np.concatenate([self.u, self.mu, self.lam_eta])


def _params(system, chart):
    out = {lab: float(chart.mu[i]) for i, lab in enumerate(system.mu_labels)}
    out.update({lab: float(chart.lam_eta[j]) for lab, j in system.adj_labels.items()})
    return out


class _Frame:
    """Maps between the full state ``(u, mu, ell)`` and the unknown vector."""

    def __init__(self, system: AugmentedSystem, active: ActiveSet, settings: Settings):
        for lab in active.released:
            system.label_column(lab)
        self.system = system
        self.active = active
        self.settings = settings
        self.cols = system.unknown_columns(active.released)
        self.n = self.cols.size
        self.dim = self.n - system.n_eq
        if self.dim not in (0, 1):
            raise ProblemError(
                f"{len(active.released)} released parameters give a {self.dim}-dimensional "
                "solution manifold; expected 0 or 1"
            )
        n_rel = len(active.released)
        self.rel_pos = {lab: self.n - n_rel + i for i, lab in enumerate(active.released)}
        self.sparse = settings.sparse if settings.sparse is not None else system.n_full >= 1000

    def z(self, chart):
        return chart.state[self.cols]

    def state(self, base, z):
        w = base.copy()
        w[self.cols] = z
        return w

    def residual(self, w):
        u, mu, ell = self.system.split(w)
        return self.system.residual(u, mu, ell)

    def jacobian(self, w):
        u, mu, ell = self.system.split(w)
        return self.system.jacobian_full(u, mu, ell, self.sparse)[:, self.cols]


class _LU:
    """LU factorization with the singularity test ``min|U_ii| <= 1e-12 ||A||_inf``."""

    def __init__(self, A):
        if sps.issparse(A):
            A = sps.csc_matrix(A)
            scale = float(abs(A).sum(axis=1).max()) if A.nnz else 1.0
            try:
                self._lu = spla.splu(A, permc_spec="COLAMD")
            except RuntimeError as exc:
                raise SingularJacobianError(str(exc)) from None
            diag = np.abs(self._lu.U.diagonal())
            self._solve = self._lu.solve
        else:
            scale = float(np.max(np.sum(np.abs(A), axis=1))) if A.size else 1.0
            lu = la.lu_factor(A, check_finite=False)
            diag = np.abs(np.diag(lu[0]))
            self._solve = lambda b: la.lu_solve(lu, b, check_finite=False)
        if not np.all(np.isfinite(diag)) or (diag.size and diag.min() <= 1e-12 * scale):
            raise SingularJacobianError("Jacobian is numerically singular")

    def solve(self, b):
        return self._solve(np.asarray(b, float))


def _append_row(J, r):
    if sps.issparse(J):
        return sps.vstack([J, sps.csr_matrix(r)], format="csc")
    return np.vstack([J, r])


def _unit(n):
    e = np.zeros(n)
    e[-1] = 1.0
    return e


def _kernel_vector(J, rng_seed=0):
    """Unit vector spanning the kernel of a full-row-rank (m x m+1) matrix."""
    r = np.random.default_rng(rng_seed).standard_normal(J.shape[1])
    t = _LU(_append_row(J, r)).solve(_unit(J.shape[1]))
    return t / np.linalg.norm(t)


def _tangent_from(J, tprev):
    t = _LU(_append_row(J, tprev)).solve(_unit(J.shape[1]))
    t /= np.linalg.norm(t)
    return t if t @ tprev >= 0 else -t


def _newton(frame: _Frame, w0, hyperplane=None):
    """Damped Newton on the frame's residual, optionally with one extra
    hyperplane row ``t . (z - z_ref) = 0``.  Returns (state, history)."""
    st = frame.settings
    z = w0[frame.cols].copy()

    def F(z):
        w = frame.state(w0, z)
        f = frame.residual(w)
        if hyperplane is not None:
            t, zr = hyperplane
            f = np.append(f, t @ (z - zr))
        return f

    def U(z):
        u, _, ell = frame.system.split(frame.state(w0, z))
        return float(np.sqrt(u @ u + ell @ ell))

    f = F(z)
    fn = float(np.linalg.norm(f))
    hist = [(0, None, None, fn, U(z))]
    if fn <= st.TOL:
        return frame.state(w0, z), hist
    for it in range(1, st.MaxIter + 1):
        J = frame.jacobian(frame.state(w0, z))
        if hyperplane is not None:
            J = _append_row(J, hyperplane[0])
        d = -_LU(J).solve(f)
        gamma = 1.0
        while True:
            zn = z + gamma * d
            try:
                fnew = F(zn)
            except (FloatingPointError, ArithmeticError):
                fnew = np.full_like(f, np.inf)
            fnn = float(np.linalg.norm(fnew))
            if fnn <= (1 - gamma / 4) * fn or fn <= st.TOL or gamma < 1.0 / 64:
                break
            gamma /= 2
        if not np.isfinite(fnn):
            raise CorrectorError("non-finite residual")
        dn = float(np.linalg.norm(gamma * d))
        z, f, fn = zn, fnew, fnn
        hist.append((it, gamma, dn, fn, U(z)))
        log.debug("newton %d gamma=%.2e |d|=%.2e |f|=%.2e", it, gamma, dn, fn)
        if fn <= st.TOL and dn <= st.TOL:
            return frame.state(w0, z), hist
    raise CorrectorError(f"no convergence in {st.MaxIter} iterations (|f|={fn:.2e})")


def _make_chart(frame, w, hist, **kw):
    last = hist[-1]
    norms = (last[2] if last[2] is not None else 0.0, last[3], last[4])
    c = Chart.from_state(frame.system, w, norms=norms, **kw)
    c.history = hist
    return c


def correct(system, chart0, active, settings=None, *, hyperplane=None):
    """Newton-correct ``chart0`` onto the solution set of ``system``.

    For a one-dimensional manifold without an explicit hyperplane, the
    correction is confined to the hyperplane through ``chart0`` orthogonal to
    the local kernel direction.
    """
    settings = settings or Settings()
    frame = _Frame(system, active, settings)
    w0 = chart0.state
    if frame.dim == 1 and hyperplane is None:
        J = frame.jacobian(w0)
        hyperplane = (_kernel_vector(J), w0[frame.cols])
    w, hist = _newton(frame, w0, hyperplane)
    return _make_chart(frame, w, hist)


def tangent(system, chart, active, prev=None, settings=None):
    """Unit tangent of the solution manifold in unknown coordinates.

    Without ``prev`` the orientation makes the first released parameter with
    a non-negligible component increase.
    """
    frame = _Frame(system, active, settings or Settings())
    if frame.dim != 1:
        raise BranchPointError("tangent requires a one-dimensional manifold")
    J = frame.jacobian(chart.state)
    try:
        if prev is not None:
            return _tangent_from(J, prev)
        t = _kernel_vector(J)
    except SingularJacobianError as exc:
        raise BranchPointError(str(exc)) from exc
    for lab in active.released:
        c = t[frame.rel_pos[lab]]
        if abs(c) > 1e-10:
            return t if c > 0 else -t
    return t


@dataclass
class RunStore:
    run_name: str
    settings: Settings
    active: ActiveSet
    system: AugmentedSystem = field(repr=False)
    charts: list = field(default_factory=list)
    events: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    sweeps: list = field(default_factory=list)

    def add(self, chart, type_tag=""):
        c = replace(chart, label=len(self.charts) + 1, type_tag=type_tag,
                    params=dict(chart.params))
        self.charts.append(c)
        if type_tag:
            self.events.append((c.label, type_tag, dict(c.params)))
        return c

    def chart(self, label):
        for c in self.charts:
            if c.label == label:
                return c
        raise KeyError(f"no chart with label {label}")

    def by_type(self, type_tag):
        return [c for c in self.charts if c.type_tag == type_tag]


class _Runner:
    def __init__(self, system, active, settings):
        self.system = system
        self.active = active
        self.st = settings
        self.frame = _Frame(system, active, settings)
        self.first = active.released[0] if active.released else None

    def value(self, chart, label):
        return chart.params[label]

    def step(self, c, s):
        """Correct the predictor ``c + s * t`` in the orthogonal hyperplane."""
        zc = self.frame.z(c)
        zp = zc + s * c.tangent
        w0 = self.frame.state(c.state, zp)
        w, hist = _newton(self.frame, w0, (c.tangent, zp))
        cn = _make_chart(self.frame, w, hist)
        J = self.frame.jacobian(cn.state)
        cn.tangent = _tangent_from(J, c.tangent)
        return cn

    def fold_fn(self, chart):
        return chart.tangent[self.frame.rel_pos[self.first]]

    def locate(self, c, h, g, gb, tol):
        """Regula falsi (Illinois) on the step length for ``g(chart) = 0``."""
        a, b = 0.0, h
        ga = g(c)
        side = 0
        best = None
        for _ in range(60):
            s = b - gb * (b - a) / (gb - ga)
            cs = self.step(c, s)
            gs = g(cs)
            best = (cs, s)
            if abs(gs) <= tol:
                break
            if np.sign(gs) == np.sign(ga):
                a, ga = s, gs
                if side == -1:
                    gb /= 2
                side = -1
            else:
                b, gb = s, gs
                if side == 1:
                    ga /= 2
                side = 1
            if abs(b - a) <= 1e-15 * max(1.0, abs(h)):
                break
        return best

    def on_boundary_outward(self, c):
        for lab, (lo, hi) in self.active.windows.items():
            if lab not in self.frame.rel_pos:
                continue
            v = self.value(c, lab)
            tv = c.tangent[self.frame.rel_pos[lab]]
            tol = 1e-10 * max(1.0, abs(lo), abs(hi))
            if (abs(v - lo) <= tol and tv < 0) or (abs(v - hi) <= tol and tv > 0):
                return True
        return False

    def crossings(self, c, cn, h):
        """Events between consecutive charts as (kind, name, g, value) tuples."""
        found = []
        for lab, (lo, hi) in self.active.windows.items():
            v0, v1 = self.value(c, lab), self.value(cn, lab)
            for bound in (lo, hi):
                if (v0 - bound) * (v1 - bound) < 0 or (v1 - bound == 0 and v0 != bound):
                    found.append(("EP", "EP", lambda ch, L=lab, B=bound: self.value(ch, L) - B, 1e-12))
        if self.first is not None:
            g0, g1 = self.fold_fn(c), self.fold_fn(cn)
            if g0 * g1 < 0 and max(abs(g0), abs(g1)) > 1e-8:
                found.append(("FP", "FP", self.fold_fn, 1e-10))
        for ev in self.system.events:
            if ev.label not in self.frame.rel_pos:
                continue
            g0 = self.value(c, ev.label) - ev.value
            g1 = self.value(cn, ev.label) - ev.value
            if g0 != 0 and g0 * g1 <= 0:
                found.append(("UZ", ev.name, lambda ch, e=ev: self.value(ch, e.label) - e.value, 1e-8))
        return found


def continue_branch(system, chart0, active, settings=None, run_name="run"):
    """Pseudo-arclength continuation in both directions from ``chart0``.

    Each direction starts with a copy of the corrected initial chart tagged
    ``EP`` and ends at a window boundary (``EP``), after ``ItMX`` steps, or
    on corrector failure.  Fold points (``FP``) are sign changes of the
    tangent component of the first released parameter; user events are
    sign changes of ``parameter - value``.
    """
    settings = (settings or Settings()).validate()
    R = _Runner(system, active, settings)
    store = RunStore(run_name, settings, active, system)
    c0 = correct(system, chart0, active, settings)
    if R.frame.dim == 0:
        store.add(c0, "EP")
        store.sweeps.append([store.charts[-1].label])
        return store
    c0.tangent = tangent(system, c0, active)
    start_events = [ev for ev in system.events if ev.label in R.frame.rel_pos
                    and abs(c0.params[ev.label] - ev.value) <= 1e-8]
    emitted_start = False
    for sgn in (1.0, -1.0):
        cs = replace(c0, tangent=sgn * c0.tangent)
        if R.on_boundary_outward(cs):
            continue
        labels = [store.add(cs, "EP").label]
        if not emitted_start:
            for ev in start_events:
                labels.append(store.add(cs, ev.name).label)
            emitted_start = True
        labels.extend(_sweep(R, store, cs))
        store.sweeps.append(labels)
    return store


def _sweep(R: _Runner, store: RunStore, c):
    st = R.st
    h = st.h0
    labels = []
    steps = 0
    while steps < st.ItMX:
        try:
            cn = R.step(c, h)
        except (ContinuationError, ArithmeticError, ValueError) as exc:
            h /= 2
            if h < st.hmin:
                store.failures.append(f"step size below hmin after label {c.label}: {exc}")
                log.info("direction terminated: %s", exc)
                return labels
            continue
        steps += 1
        hits = []
        for kind, name, g, tol in R.crossings(c, cn, h):
            try:
                ce, s = R.locate(c, h, g, g(cn), tol)
            except ContinuationError as exc:
                log.warning("could not locate %s: %s", name, exc)
                continue
            hits.append((s, kind, name, ce))
        hits.sort(key=lambda x: x[0])
        for s, kind, name, ce in hits:
            if kind == "EP":
                labels.append(store.add(ce, "EP").label)
                return labels
            labels.append(store.add(ce, name).label)
        last = steps == st.ItMX
        labels.append(store.add(cn, "EP" if last else "").label)
        iters = len(cn.history) - 1
        if iters <= 3:
            h = min(2 * h, st.hmax)
        h = max(h, st.hmin)
        c = cn
    return labels


def solve_adjoint_direct(system: AugmentedSystem, chart, selection):
    """Solve the linear adjoint conditions at ``chart``.

    ``selection`` fixes complementary parameters (e.g. ``{'e.da': 1.0}``);
    every other adjoint variable is solved for.  Returns the full vector of
    adjoint variables.
    """
    if not system.adjoint:
        raise ProblemError("system has no adjoint conditions")
    u = np.asarray(chart.u, float)
    A = system.adjoint_operator(u)
    fixed = np.zeros(system.n_adj, bool)
    ell = np.zeros(system.n_adj)
    for lab, val in selection.items():
        if lab not in system.adj_labels:
            raise ProblemError(f"{lab!r} is not a complementary parameter")
        j = system.adj_labels[lab]
        fixed[j] = True
        ell[j] = float(val)
    free = ~fixed
    M = A[:, free]
    if M.shape[0] != M.shape[1]:
        raise ProblemError(f"adjoint system is {M.shape[0]} x {M.shape[1]}, not square")
    rhs = -A[:, fixed] @ ell[fixed]
    ell[free] = _LU(M).solve(rhs)
    return ell


def correct_at(system, chart, released, values, settings=None):
    """Correct ``chart`` on a square problem after overriding parameters.

    ``values`` maps continuation-parameter labels to new fixed values and
    ``released`` lists the labels solved for.  Adjoint variables of
    ``chart`` are dropped if ``system`` has none.
    """
    mu = np.array(chart.mu, float, copy=True)
    ell = np.array(chart.lam_eta, float, copy=True) if system.adjoint else np.zeros(0)
    for lab, val in values.items():
        if lab in system.mu_labels:
            mu[system.mu_labels.index(lab)] = val
        elif lab in system.adj_labels:
            ell[system.adj_labels[lab]] = val
        else:
            raise ProblemError(f"unknown continuation parameter {lab!r}")
    c = Chart(np.array(chart.u, float, copy=True), mu, ell)
    active = ActiveSet(tuple(released))
    frame = _Frame(system, active, settings or Settings())
    if frame.dim != 0:
        raise ProblemError("correct_at needs a square problem")
    return correct(system, c, active, settings)
